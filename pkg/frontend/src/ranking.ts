// Operator view: live ranking table, sortable, refreshed on demand.

import { RankingRow, StudyApi } from "./api.js";

export type SortKey = "mu" | "win_rate" | "appearances";

export function sortRows(rows: RankingRow[], key: SortKey): RankingRow[] {
  const value = (row: RankingRow): number => {
    const v = row[key];
    return v === null ? -Infinity : (v as number);
  };
  return [...rows].sort((a, b) => value(b) - value(a));
}

export function formatWinRate(rate: number | null): string {
  return rate === null ? "n/a" : `${(100 * rate).toFixed(1)}%`;
}

export function renderRankingTable(target: HTMLElement, rows: RankingRow[],
                                   key: SortKey = "mu"): void {
  if (rows.length === 0) {
    target.innerHTML = `<p data-role="empty">No votes recorded yet.</p>`;
    return;
  }
  const body = sortRows(rows, key).map((row) => `
      <tr>
        <td>${row.method}</td>
        <td>${row.mu.toFixed(2)} &plusmn; ${row.sigma.toFixed(2)}</td>
        <td>${formatWinRate(row.win_rate)}</td>
        <td>${row.appearances}</td>
      </tr>`).join("");
  target.innerHTML = `
    <table>
      <thead>
        <tr>
          <th>Method</th>
          <th data-sort="mu">Skill</th>
          <th data-sort="win_rate">Win rate</th>
          <th data-sort="appearances">Appearances</th>
        </tr>
      </thead>
      <tbody>${body}</tbody>
    </table>`;
}

export class RankingController {
  private rows: RankingRow[] = [];
  private key: SortKey = "mu";

  constructor(private root: HTMLElement, private api: StudyApi) {
    this.root.innerHTML = `
      <button data-role="refresh" type="button">Refresh ranking</button>
      <div data-role="table"></div>`;
    this.root.querySelector("[data-role=refresh]")!
      .addEventListener("click", () => void this.refresh());
    this.root.addEventListener("click", (event) => {
      const sort = (event.target as HTMLElement).dataset?.sort as SortKey | undefined;
      if (sort) {
        this.key = sort;
        this.renderTable();
      }
    });
  }

  private renderTable(): void {
    renderRankingTable(
      this.root.querySelector("[data-role=table]") as HTMLElement,
      this.rows, this.key);
  }

  async refresh(): Promise<void> {
    try {
      this.rows = await this.api.fetchRanking();
    } catch (err) {
      this.rows = [];
    }
    this.renderTable();
  }
}
