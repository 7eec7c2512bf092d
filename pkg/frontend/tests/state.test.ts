import { describe, expect, it } from "vitest";

import type { SessionView, TurnView } from "../src/api.js";
import {
  canSend,
  exportReadiness,
  labelBadge,
  viewFingerprint,
  withLabel,
} from "../src/state.js";

function turn(index: number, from: "human" | "gpt", label: string | null = null): TurnView {
  return { index, from, value: `t${index}`, label };
}

function view(overrides: Partial<SessionView> = {}): SessionView {
  return {
    id: "s1",
    model_tag: "polya-v2",
    endpoint: "mock-tutor",
    domain: "geometry",
    closed: false,
    pending: false,
    problem: { id: "p-1", question: "q", final_answer: "1" },
    persona: null,
    turns: [turn(0, "human"), turn(1, "gpt")],
    unlabeled_tutor_turns: [1],
    ...overrides,
  };
}

describe("labelBadge", () => {
  it("shows the label or 'unlabeled'", () => {
    expect(labelBadge(turn(1, "gpt"))).toBe("unlabeled");
    expect(labelBadge(turn(1, "gpt", "S3"))).toBe("S3");
  });
});

describe("canSend", () => {
  it("requires an open session with no reply in flight", () => {
    expect(canSend(view(), false)).toBe(true);
    expect(canSend(view({ closed: true }), false)).toBe(false);
    expect(canSend(view({ pending: true }), false)).toBe(false);
    expect(canSend(view(), true)).toBe(false);
    expect(canSend(null, false)).toBe(false);
  });
});

describe("exportReadiness", () => {
  it("blocks while tutor turns are unlabeled, with a count", () => {
    const readiness = exportReadiness(view());
    expect(readiness.ready).toBe(false);
    expect(readiness.reason).toContain("1 tutor turn");
  });

  it("is ready once every tutor turn is labeled", () => {
    const labeled = view({
      turns: [turn(0, "human"), turn(1, "gpt", "S1")],
      unlabeled_tutor_turns: [],
    });
    expect(exportReadiness(labeled)).toEqual({ ready: true, reason: null });
  });

  it("blocks empty sessions", () => {
    expect(exportReadiness(view({ turns: [], unlabeled_tutor_turns: [] })).ready).toBe(false);
  });
});

describe("withLabel", () => {
  it("relabels locally with last-write-wins, mirroring the server", () => {
    let current = view({
      turns: [turn(0, "human"), turn(1, "gpt"), turn(2, "human"), turn(3, "gpt")],
      unlabeled_tutor_turns: [1, 3],
    });
    current = withLabel(current, 1, "S2");
    expect(current.turns[1]?.label).toBe("S2");
    expect(current.unlabeled_tutor_turns).toEqual([3]);
    current = withLabel(current, 1, "S3");
    expect(current.turns[1]?.label).toBe("S3");
    expect(current.unlabeled_tutor_turns).toEqual([3]);
  });
});

describe("viewFingerprint", () => {
  it("is identical for identical server views and sensitive to labels", () => {
    expect(viewFingerprint(view())).toBe(viewFingerprint(view()));
    expect(viewFingerprint(withLabel(view(), 1, "S1"))).not.toBe(viewFingerprint(view()));
  });
});
