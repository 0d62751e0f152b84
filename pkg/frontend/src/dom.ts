// DOM bindings: translate viewer state into the counter, image, status
// badge, note field and error banner. The page holds no durable state of
// its own; everything shown is reconstructable from server responses.

import { QueueSummary, pngUrl } from './api.js';
import { Viewer, ViewerHooks } from './viewer.js';

export interface Elements {
  counter: HTMLElement;
  image: HTMLImageElement;
  badge: HTMLElement;
  note: HTMLTextAreaElement;
  banner: HTMLElement;
  queueList: HTMLElement;
  viewerSection: HTMLElement;
}

export function grabElements(doc: Document): Elements {
  const get = (id: string) => {
    const el = doc.getElementById(id);
    if (!el) {
      throw new Error(`missing element #${id}`);
    }
    return el;
  };
  return {
    counter: get('counter'),
    image: get('png') as HTMLImageElement,
    badge: get('status-badge'),
    note: get('note') as HTMLTextAreaElement,
    banner: get('banner'),
    queueList: get('queue-list'),
    viewerSection: get('viewer'),
  };
}

export function renderQueueList(
  el: Elements,
  queues: QueueSummary[],
  onSelect: (queue: QueueSummary) => void,
): void {
  el.queueList.textContent = '';
  if (queues.length === 0) {
    el.queueList.textContent = 'No ledgers in the archive yet.';
    return;
  }
  const table = el.queueList.ownerDocument.createElement('table');
  const head = table.insertRow();
  for (const title of ['dataset', 'pipeline', 'items', 'non-yes', 'suspect', '']) {
    const cell = head.ownerDocument.createElement('th');
    cell.textContent = title;
    head.appendChild(cell);
  }
  for (const queue of queues) {
    const row = table.insertRow();
    row.insertCell().textContent = queue.dataset;
    row.insertCell().textContent = queue.pipeline;
    row.insertCell().textContent = String(queue.total);
    row.insertCell().textContent = String(queue.non_yes);
    row.insertCell().textContent = String(queue.suspect);
    const button = row.ownerDocument.createElement('button');
    button.textContent = 'review';
    button.addEventListener('click', () => onSelect(queue));
    row.insertCell().appendChild(button);
  }
  el.queueList.appendChild(table);
}

function showBanner(el: Elements, message: string): void {
  el.banner.textContent = message;
  el.banner.hidden = false;
}

export function domHooks(el: Elements): ViewerHooks {
  return {
    onRender(viewer: Viewer): void {
      const item = viewer.current;
      el.counter.textContent = viewer.counterText();
      const url = pngUrl(item.item_id);
      if (el.image.getAttribute('src') !== url) {
        el.image.setAttribute('src', url);
        el.note.value = viewer.noteBuffer;
      }
      el.badge.textContent = item.status + (item.suspect ? ' (suspect)' : '');
      el.badge.className = `badge badge-${item.status}`;
      el.banner.hidden = true;
    },
    onError(message: string): void {
      showBanner(el, message);
    },
    prefetch(url: string): void {
      const img = new Image();
      img.src = url;
    },
  };
}

export function bindNoteField(el: Elements, viewer: Viewer): void {
  el.note.addEventListener('focus', () => viewer.setNoteFocus(true));
  el.note.addEventListener('blur', () => viewer.setNoteFocus(false));
  el.note.addEventListener('input', () => viewer.setNote(el.note.value));
}

export function bindVerdictButtons(root: Document, viewer: Viewer): void {
  for (const button of Array.from(
    root.querySelectorAll<HTMLButtonElement>('button[data-status]'))) {
    button.addEventListener('click', () => {
      const status = button.dataset.status as 'yes' | 'no' | 'maybe';
      void viewer.submitVerdict(status);
    });
  }
}
