// Review loop state machine: current item, montage clock, prefetch window,
// note buffer, and write-through verdict submission. Framework-free so the
// whole loop is drivable from tests; the server stays the source of truth.

import { Counts, QueueItem, QueueState, VerdictAck, postVerdict, pngUrl } from './api.js';

export type MontageSpeed = 'slow' | 'fast';
export type MontageMode = 'off' | MontageSpeed;

export const MONTAGE_INTERVAL_MS: Record<MontageSpeed, number> = {
  slow: 1000,
  fast: 250,
};

export const PREFETCH_HORIZON = 8;

export interface ViewerHooks {
  /** Re-render the counter, image and badge for the current item. */
  onRender(viewer: Viewer): void;
  /** Surface an error banner; local state has not changed. */
  onError(message: string): void;
  /** Warm an image URL (browser: new Image().src = url). */
  prefetch(url: string): void;
  /** Montage started/stopped (update the play control, if any). */
  onMontage?(mode: MontageMode): void;
}

export class Viewer {
  readonly dataset: string;
  readonly pipeline: string;
  items: QueueItem[];
  counts: Counts;
  index = 0;
  montage: MontageMode = 'off';
  noteBuffer = '';
  noteFocused = false;
  horizon = PREFETCH_HORIZON;

  private timer: ReturnType<typeof setTimeout> | null = null;
  private inflight = new Map<string, Promise<unknown>>();
  private readonly user: string;

  constructor(
    queue: QueueState,
    private readonly hooks: ViewerHooks,
    user = 'reviewer',
  ) {
    this.dataset = queue.dataset;
    this.pipeline = queue.pipeline;
    this.items = queue.items;
    this.counts = queue.counts;
    this.user = user;
    this.prefetchAhead();
    hooks.onRender(this);
  }

  get current(): QueueItem {
    return this.items[this.index];
  }

  get total(): number {
    return this.items.length;
  }

  /** 1-based position of the current item, as shown on the counter. */
  get position(): number {
    return this.index + 1;
  }

  get remaining(): number {
    return this.total - this.position;
  }

  counterText(): string {
    return `${this.position} / ${this.total} (${this.remaining} left)`;
  }

  navigate(direction: 'prev' | 'next'): void {
    const delta = direction === 'next' ? 1 : -1;
    const next = Math.min(Math.max(this.index + delta, 0), this.total - 1);
    if (next !== this.index) {
      this.index = next;
      this.noteBuffer = '';
    }
    this.prefetchAhead();
    this.hooks.onRender(this);
  }

  private prefetchAhead(): void {
    for (let i = this.index + 1; i <= this.index + this.horizon; i++) {
      if (i < this.total) {
        this.hooks.prefetch(pngUrl(this.items[i].item_id));
      }
    }
  }

  toggleMontage(speed: MontageSpeed): void {
    if (this.montage !== 'off') {
      this.stopMontage();
      return;
    }
    if (this.noteFocused || this.index >= this.total - 1) {
      return;
    }
    this.montage = speed;
    this.hooks.onMontage?.(this.montage);
    this.schedule();
  }

  stopMontage(): void {
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    if (this.montage !== 'off') {
      this.montage = 'off';
      this.hooks.onMontage?.('off');
    }
  }

  private schedule(): void {
    if (this.montage === 'off') {
      return;
    }
    this.timer = setTimeout(() => {
      this.timer = null;
      if (this.montage === 'off') {
        return;
      }
      this.navigate('next');
      if (this.index >= this.total - 1) {
        this.stopMontage();   // final item reached: montage ends there
      } else {
        this.schedule();
      }
    }, MONTAGE_INTERVAL_MS[this.montage]);
  }

  setNoteFocus(focused: boolean): void {
    this.noteFocused = focused;
    if (focused) {
      this.stopMontage();
    }
  }

  setNote(text: string): void {
    this.noteBuffer = text;
  }

  /**
   * POST the verdict for the current item. The badge and counts update only
   * from the acknowledgment; on failure the banner shows and nothing moves.
   * A second submit for the same item queues behind the in-flight one.
   */
  submitVerdict(status: 'yes' | 'no' | 'maybe', note?: string): Promise<void> {
    this.stopMontage();
    const item = this.current;
    const text = note !== undefined ? note : this.noteBuffer;
    const previous = this.inflight.get(item.item_id) ?? Promise.resolve();
    const chained = previous
      .catch(() => undefined)
      .then(() => postVerdict(item.item_id, status, text, this.user))
      .then((ack: VerdictAck) => {
        item.status = ack.status;
        this.counts = ack.counts;
        if (item === this.current) {
          this.noteBuffer = '';
        }
        this.hooks.onRender(this);
      })
      .catch((error: unknown) => {
        const message = error instanceof Error ? error.message : String(error);
        this.hooks.onError(message);
      });
    this.inflight.set(item.item_id, chained);
    return chained;
  }
}
