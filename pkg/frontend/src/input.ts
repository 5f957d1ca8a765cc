// Direction derivation from keyboard state and gamepad axes.
//
// Arrows and WASD map onto the two axes with screen-up as -y.  Opposite keys
// cancel; diagonals are normalized to unit length.  An active gamepad stick
// (past the deadzone) overrides the keyboard entirely.

export interface Direction {
  dx: number;
  dy: number;
}

export const GAMEPAD_DEADZONE = 0.15;

const KEY_AXES: Record<string, Direction> = {
  ArrowRight: { dx: 1, dy: 0 },
  KeyD: { dx: 1, dy: 0 },
  ArrowLeft: { dx: -1, dy: 0 },
  KeyA: { dx: -1, dy: 0 },
  ArrowUp: { dx: 0, dy: -1 },
  KeyW: { dx: 0, dy: -1 },
  ArrowDown: { dx: 0, dy: 1 },
  KeyS: { dx: 0, dy: 1 },
};

function clampToUnit(dx: number, dy: number): Direction {
  const norm = Math.hypot(dx, dy);
  if (norm > 1) {
    return { dx: dx / norm, dy: dy / norm };
  }
  return { dx, dy };
}

export function deriveDirection(
  pressed: ReadonlySet<string>,
  gamepadAxes: readonly number[] | null = null,
): Direction {
  if (gamepadAxes && gamepadAxes.length >= 2) {
    const [ax, ay] = gamepadAxes;
    if (Math.hypot(ax, ay) > GAMEPAD_DEADZONE) {
      return clampToUnit(ax, ay);
    }
  }
  let dx = 0;
  let dy = 0;
  for (const code of pressed) {
    const axis = KEY_AXES[code];
    if (axis) {
      dx += axis.dx;
      dy += axis.dy;
    }
  }
  // duplicate bindings (arrow + WASD held together) still mean one unit
  dx = Math.sign(dx);
  dy = Math.sign(dy);
  return clampToUnit(dx, dy);
}

/** Tracks currently pressed keys and polls the first connected gamepad. */
export class InputTracker {
  private pressed = new Set<string>();
  private readonly onKeyDown = (event: KeyboardEvent) => {
    if (event.code in KEY_AXES) {
      this.pressed.add(event.code);
      event.preventDefault();
    }
  };
  private readonly onKeyUp = (event: KeyboardEvent) => {
    this.pressed.delete(event.code);
  };

  attach(target: Pick<Document, "addEventListener">): void {
    target.addEventListener("keydown", this.onKeyDown as EventListener);
    target.addEventListener("keyup", this.onKeyUp as EventListener);
  }

  detach(target: Pick<Document, "removeEventListener">): void {
    target.removeEventListener("keydown", this.onKeyDown as EventListener);
    target.removeEventListener("keyup", this.onKeyUp as EventListener);
    this.pressed.clear();
  }

  gamepadAxes(): readonly number[] | null {
    if (typeof navigator === "undefined" || !navigator.getGamepads) {
      return null;
    }
    for (const pad of navigator.getGamepads()) {
      if (pad && pad.connected) {
        return pad.axes;
      }
    }
    return null;
  }

  direction(): Direction {
    return deriveDirection(this.pressed, this.gamepadAxes());
  }
}
