import { StudyApi } from "./api.js";
import { TrialController } from "./app.js";
import { RankingController } from "./ranking.js";

function boot(): void {
  const api = new StudyApi("");
  const trialRoot = document.getElementById("trial");
  const rankingRoot = document.getElementById("ranking");
  if (!trialRoot || !rankingRoot) throw new Error("page shell is incomplete");
  const controller = new TrialController(trialRoot, api, window.localStorage, document);
  controller.bindKeyboard();
  void controller.loadNext();
  const ranking = new RankingController(rankingRoot, api);
  void ranking.refresh();
}

document.addEventListener("DOMContentLoaded", boot);
