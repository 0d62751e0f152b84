import { getQueue, listQueues } from './api.js';
import { bindNoteField, bindVerdictButtons, domHooks, grabElements, renderQueueList } from './dom.js';
import { bindKeyboard } from './keyboard.js';
import { Viewer } from './viewer.js';

async function start(): Promise<void> {
  const el = grabElements(document);
  const queues = await listQueues();
  renderQueueList(el, queues, async (summary) => {
    const queue = await getQueue(summary.dataset, summary.pipeline);
    if (queue.items.length === 0) {
      el.queueList.textContent = 'Queue is empty.';
      return;
    }
    el.viewerSection.hidden = false;
    const viewer = new Viewer(queue, domHooks(el));
    bindNoteField(el, viewer);
    bindVerdictButtons(document, viewer);
    bindKeyboard(viewer, { noteField: el.note });
    // any click stops the montage so a failure can be recorded right there
    document.addEventListener('click', () => viewer.stopMontage());
  });
}

void start().catch((error) => {
  const banner = document.getElementById('banner');
  if (banner) {
    banner.textContent = error instanceof Error ? error.message : String(error);
    banner.hidden = false;
  }
});
