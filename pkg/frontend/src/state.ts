/**
 * Pure projections over server responses. The server owns all session state;
 * these helpers only answer UI questions (what is enabled, what badge to
 * show), so a hard refresh rebuilds the identical view from GET responses.
 */

import type { SessionView, TurnView } from "./api.js";

export const STAGE_LABELS = ["S1", "S2", "S3", "S4", "ERR"] as const;
export type StageLabel = (typeof STAGE_LABELS)[number];

export const LABEL_TITLES: Record<StageLabel, string> = {
  S1: "Understand",
  S2: "Plan",
  S3: "Execute",
  S4: "Look back",
  ERR: "Error",
};

export function labelBadge(turn: TurnView): string {
  return turn.label ?? "unlabeled";
}

export function isTutorTurn(turn: TurnView): boolean {
  return turn.from === "gpt";
}

export function canSend(view: SessionView | null, sending: boolean): boolean {
  return view !== null && !view.closed && !view.pending && !sending;
}

export function unlabeledCount(view: SessionView): number {
  return view.unlabeled_tutor_turns.length;
}

export interface ExportReadiness {
  ready: boolean;
  reason: string | null;
}

export function exportReadiness(view: SessionView): ExportReadiness {
  const unlabeled = unlabeledCount(view);
  if (unlabeled > 0) {
    return { ready: false, reason: `${unlabeled} tutor turn(s) still unlabeled` };
  }
  if (view.turns.length === 0) {
    return { ready: false, reason: "no turns yet" };
  }
  return { ready: true, reason: null };
}

/**
 * Local echo of the server's last-write-wins labeling, applied to the view a
 * component already holds. The next GET returns the same projection.
 */
export function withLabel(view: SessionView, turnIndex: number, label: StageLabel): SessionView {
  return {
    ...view,
    turns: view.turns.map((turn) =>
      turn.index === turnIndex ? { ...turn, label } : turn,
    ),
    unlabeled_tutor_turns: view.unlabeled_tutor_turns.filter((index) => index !== turnIndex),
  };
}

/** Stable fingerprint of everything the chat view renders; used to verify a
 * refreshed view is identical to the live one. */
export function viewFingerprint(view: SessionView): string {
  return JSON.stringify({
    id: view.id,
    model: view.model_tag,
    domain: view.domain,
    closed: view.closed,
    problem: view.problem.id,
    turns: view.turns.map((turn) => [turn.index, turn.from, turn.value, turn.label]),
  });
}
