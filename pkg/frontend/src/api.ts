// Typed fetch client for the review service JSON API.

export interface QueueSummary {
  dataset: string;
  pipeline: string;
  total: number;
  non_yes: number;
  suspect: number;
}

export interface QueueItem {
  item_id: string;
  png_path: string;
  status: string;
  suspect: boolean;
  position: number;
  total: number;
}

export interface Counts {
  yes: number;
  no: number;
  maybe: number;
}

export interface QueueState {
  dataset: string;
  pipeline: string;
  counts: Counts;
  items: QueueItem[];
}

export interface VerdictAck {
  item_id: string;
  status: string;
  counts: Counts;
}

export class ApiError extends Error {
  readonly status: number;

  constructor(status: number, message: string) {
    super(message);
    this.name = 'ApiError';
    this.status = status;
  }
}

async function throwFrom(response: Response): Promise<never> {
  let message = `request failed (${response.status})`;
  try {
    const body = await response.json();
    if (body && typeof body.detail === 'string') {
      message = body.detail;
    }
  } catch {
    // non-JSON error body: keep the generic message
  }
  throw new ApiError(response.status, message);
}

async function getJson<T>(url: string): Promise<T> {
  const response = await fetch(url);
  if (!response.ok) {
    return throwFrom(response);
  }
  return (await response.json()) as T;
}

export function pngUrl(itemId: string): string {
  return `/api/png/${itemId}`;
}

export function listQueues(): Promise<QueueSummary[]> {
  return getJson('/api/queues');
}

export function getQueue(dataset: string, pipeline: string): Promise<QueueState> {
  return getJson(`/api/queues/${encodeURIComponent(dataset)}/${encodeURIComponent(pipeline)}`);
}

export function getProgress(dataset: string, pipeline: string): Promise<{ counts: Counts }> {
  return getJson(`/api/progress/${encodeURIComponent(dataset)}/${encodeURIComponent(pipeline)}`);
}

export async function postVerdict(
  itemId: string,
  status: string,
  note: string,
  user: string,
): Promise<VerdictAck> {
  const response = await fetch('/api/verdict', {
    method: 'POST',
    headers: { 'Content-Type': 'application/json' },
    body: JSON.stringify({ item_id: itemId, status, note, user }),
  });
  if (!response.ok) {
    return throwFrom(response);
  }
  return (await response.json()) as VerdictAck;
}
