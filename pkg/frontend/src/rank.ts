import { RANK_KEYS, RankKey } from "./types.js";

/** Ordering model behind the drag-rank widget. The list always contains each
 * candidate exactly once, so every state it can reach is a permutation:
 * duplicate ranks are unrepresentable. */
export class RankOrder {
  private order: RankKey[];

  constructor(initial?: RankKey[]) {
    this.order = initial && isPermutation(initial) ? [...initial] : [...RANK_KEYS];
  }

  get list(): RankKey[] {
    return [...this.order];
  }

  rankOf(key: RankKey): number {
    return this.order.indexOf(key) + 1;
  }

  /** Move the item at `from` so it sits at `to` (drag semantics). */
  move(from: number, to: number): void {
    if (from < 0 || from >= this.order.length || to < 0 || to >= this.order.length) {
      return;
    }
    const [item] = this.order.splice(from, 1);
    this.order.splice(to, 0, item);
  }

  moveUp(key: RankKey): void {
    const i = this.order.indexOf(key);
    if (i > 0) this.move(i, i - 1);
  }

  moveDown(key: RankKey): void {
    const i = this.order.indexOf(key);
    if (i >= 0 && i < this.order.length - 1) this.move(i, i + 1);
  }
}

export function isPermutation(keys: RankKey[]): boolean {
  return (
    keys.length === RANK_KEYS.length &&
    new Set(keys).size === RANK_KEYS.length &&
    RANK_KEYS.every(k => keys.includes(k))
  );
}
