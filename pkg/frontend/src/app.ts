// Voting view: shows one blinded trial at a time, submits votes, advances.

import { Choice, StudyApi, TrialView } from "./api.js";

const TOKEN_KEY = "study-participant-token";

export function getParticipantToken(storage: Storage): string {
  let token = storage.getItem(TOKEN_KEY);
  if (!token) {
    token = Array.from({ length: 16 }, () =>
      Math.floor(Math.random() * 16).toString(16)).join("");
    storage.setItem(TOKEN_KEY, token);
  }
  return token;
}

export class TrialController {
  private current: TrialView | null = null;
  private submitting = false;
  readonly participant: string;

  constructor(
    private root: HTMLElement,
    private api: StudyApi,
    storage: Storage,
    private doc: Document,
  ) {
    this.participant = getParticipantToken(storage);
    this.renderShell();
  }

  private el<T extends HTMLElement>(selector: string): T {
    const found = this.root.querySelector(selector);
    if (!found) throw new Error(`missing element ${selector}`);
    return found as T;
  }

  private renderShell(): void {
    this.root.innerHTML = `
      <div class="status" data-role="status"></div>
      <div class="category" data-role="category"></div>
      <div class="pair">
        <figure><img data-role="left-image" alt="left image"></figure>
        <figure><img data-role="right-image" alt="right image"></figure>
      </div>
      <div class="controls">
        <button data-role="vote-left" type="button">Left (&larr;)</button>
        <button data-role="vote-tie" type="button">Tie (T)</button>
        <button data-role="vote-right" type="button">Right (&rarr;)</button>
      </div>
      <div class="banner hidden" data-role="banner">
        <span data-role="banner-text"></span>
        <button data-role="retry" type="button">Retry</button>
      </div>`;
    this.el("[data-role=vote-left]").addEventListener("click", () => void this.vote("left"));
    this.el("[data-role=vote-right]").addEventListener("click", () => void this.vote("right"));
    this.el("[data-role=vote-tie]").addEventListener("click", () => void this.vote("tie"));
    this.el("[data-role=retry]").addEventListener("click", () => void this.loadNext());
  }

  bindKeyboard(): void {
    this.doc.addEventListener("keydown", (event) => {
      const key = (event as KeyboardEvent).key;
      if (key === "ArrowLeft") void this.vote("left");
      else if (key === "ArrowRight") void this.vote("right");
      else if (key === "t" || key === "T") void this.vote("tie");
    });
  }

  private setBanner(message: string | null): void {
    const banner = this.el("[data-role=banner]");
    if (message === null) {
      banner.classList.add("hidden");
    } else {
      banner.classList.remove("hidden");
      this.el("[data-role=banner-text]").textContent = message;
    }
  }

  private setStatus(message: string): void {
    this.el("[data-role=status]").textContent = message;
  }

  async loadNext(): Promise<void> {
    this.setBanner(null);
    this.current = null;
    try {
      const trial = await this.api.fetchTrial();
      this.el<HTMLImageElement>("[data-role=left-image]").src =
        this.api.imageUrl(trial.left_url);
      this.el<HTMLImageElement>("[data-role=right-image]").src =
        this.api.imageUrl(trial.right_url);
      this.el("[data-role=category]").textContent = trial.category;
      this.current = trial;
      this.setStatus("Which image looks more realistic?");
    } catch (err) {
      this.setBanner("The study service is unreachable.");
    }
  }

  /** Exactly one vote request per displayed trial: re-entry and votes with
      no trial on screen are ignored. */
  async vote(choice: Choice): Promise<void> {
    if (this.submitting || this.current === null) return;
    this.submitting = true;
    const trial = this.current;
    this.current = null; // the displayed trial is consumed by this vote
    try {
      const status = await this.api.submitVote(trial.trial_id, choice, this.participant);
      if (status === 409) {
        this.setStatus("That comparison was already answered; here is a new one.");
      } else if (status !== 200) {
        this.setStatus(`Vote failed (${status}); skipping to the next pair.`);
      }
      await this.loadNext();
    } catch (err) {
      this.current = trial; // keep the trial so the vote can be retried
      this.setBanner("Could not reach the study service.");
    } finally {
      this.submitting = false;
    }
  }
}
