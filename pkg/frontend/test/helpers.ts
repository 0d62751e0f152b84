// An in-memory emulation of the review service: fetch is stubbed to behave
// like the documented API, with a "ledger" map standing in for the CSV so
// reload-style reconstruction can be exercised.

import { vi } from 'vitest';
import type { Counts, QueueState } from '../src/api.js';

export interface LedgerRow {
  status: string;
  note: string;
  user: string;
}

export class FakeServer {
  ledger = new Map<string, LedgerRow>();
  posts: Array<{ item_id: string; status: string; note: string; user: string }> = [];
  inflight = 0;
  maxInflight = 0;
  failNext = false;
  dataset = 'synth';
  pipeline = 'montage';

  constructor(n: number) {
    for (let i = 0; i < n; i++) {
      this.ledger.set(this.itemId(i), { status: 'yes', note: '', user: 'system' });
    }
  }

  itemId(i: number): string {
    return `${this.dataset}/${this.pipeline}/sub-${String(i).padStart(3, '0')}_T1w`;
  }

  counts(): Counts {
    const counts = { yes: 0, no: 0, maybe: 0 };
    for (const row of this.ledger.values()) {
      counts[row.status as keyof Counts] += 1;
    }
    return counts;
  }

  queueState(): QueueState {
    const ids = Array.from(this.ledger.keys()).sort();
    return {
      dataset: this.dataset,
      pipeline: this.pipeline,
      counts: this.counts(),
      items: ids.map((id, index) => ({
        item_id: id,
        png_path: `${id}.png`,
        status: this.ledger.get(id)!.status,
        suspect: false,
        position: index + 1,
        total: ids.length,
      })),
    };
  }

  install(): void {
    vi.stubGlobal('fetch', (input: RequestInfo | URL, init?: RequestInit) =>
      this.handle(String(input), init));
  }

  private json(payload: unknown, status = 200): Response {
    return new Response(JSON.stringify(payload), {
      status,
      headers: { 'Content-Type': 'application/json' },
    });
  }

  private async handle(url: string, init?: RequestInit): Promise<Response> {
    if (url === '/api/verdict' && init?.method === 'POST') {
      this.inflight += 1;
      this.maxInflight = Math.max(this.maxInflight, this.inflight);
      try {
        await Promise.resolve();   // let overlapping posts overlap
        const body = JSON.parse(String(init.body));
        this.posts.push(body);
        if (this.failNext) {
          this.failNext = false;
          return this.json({ detail: 'ledger is read-only on this instance' }, 403);
        }
        if (!this.ledger.has(body.item_id)) {
          return this.json({ detail: `unknown item ${body.item_id}` }, 404);
        }
        this.ledger.set(body.item_id, {
          status: body.status,
          note: body.note,
          user: body.user,
        });
        return this.json({
          item_id: body.item_id,
          status: body.status,
          counts: this.counts(),
        });
      } finally {
        this.inflight -= 1;
      }
    }
    if (url.startsWith('/api/queues/')) {
      return this.json(this.queueState());
    }
    if (url === '/api/queues') {
      const state = this.queueState();
      return this.json([{
        dataset: this.dataset,
        pipeline: this.pipeline,
        total: state.items.length,
        non_yes: state.counts.no + state.counts.maybe,
        suspect: 0,
      }]);
    }
    return this.json({ detail: `no route ${url}` }, 404);
  }
}

export function recordingHooks() {
  const renders: string[] = [];
  const errors: string[] = [];
  const prefetched: string[] = [];
  return {
    renders,
    errors,
    prefetched,
    hooks: {
      onRender: (viewer: { counterText(): string }) => {
        renders.push(viewer.counterText());
      },
      onError: (message: string) => {
        errors.push(message);
      },
      prefetch: (url: string) => {
        prefetched.push(url);
      },
    },
  };
}
