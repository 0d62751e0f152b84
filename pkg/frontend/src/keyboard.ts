// Global key map for the review loop.
//
//   left/right  navigate          space  toggle montage (current speed)
//   1 / 2       slow / fast       y/n/m  record a verdict
//   t           focus the note    Escape leave the note field
//
// While the note field has focus every shortcut is inert (typing a note
// must never change a status); Escape returns focus to the viewer.

import { Viewer } from './viewer.js';

export interface KeyboardTargets {
  noteField: HTMLTextAreaElement;
}

export function bindKeyboard(
  viewer: Viewer,
  targets: KeyboardTargets,
  win: Pick<Window, 'addEventListener'> = window,
): (event: KeyboardEvent) => void {
  const handler = (event: KeyboardEvent) => {
    if (viewer.noteFocused) {
      if (event.key === 'Escape') {
        targets.noteField.blur();
      }
      return;
    }
    // any key stops a running montage; the key's own action still applies
    const wasRunning = viewer.montage !== 'off';
    if (wasRunning) {
      viewer.stopMontage();
    }
    switch (event.key) {
      case 'ArrowLeft':
        event.preventDefault();
        viewer.navigate('prev');
        break;
      case 'ArrowRight':
        event.preventDefault();
        viewer.navigate('next');
        break;
      case ' ':
        event.preventDefault();
        if (!wasRunning) {
          viewer.toggleMontage('fast');
        }
        break;
      case '1':
        if (!wasRunning) {
          viewer.toggleMontage('slow');
        }
        break;
      case '2':
        if (!wasRunning) {
          viewer.toggleMontage('fast');
        }
        break;
      case 'y':
        void viewer.submitVerdict('yes');
        break;
      case 'n':
        void viewer.submitVerdict('no');
        break;
      case 'm':
        void viewer.submitVerdict('maybe');
        break;
      case 't':
        event.preventDefault();
        targets.noteField.focus();
        break;
      default:
        break;
    }
  };
  win.addEventListener('keydown', handler as EventListener);
  return handler;
}
