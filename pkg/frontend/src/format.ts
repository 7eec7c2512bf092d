/**
 * Display formatting for the metrics grid. All numbers come from the backend
 * unrounded; the only math here is rounding to one decimal for display.
 */

import type { MetricsRow } from "./api.js";

export const METRICS_COLUMNS = [
  "Model",
  "Domain",
  "Avg Conv. Length",
  "Stage 1",
  "Stage 2",
  "Stage 3",
  "Stage 4",
  "Error rate",
] as const;

export function formatPercent(value: number): string {
  return `${value.toFixed(1)}%`;
}

export function formatLength(value: number): string {
  return value.toFixed(1);
}

export function displayModel(tag: string): string {
  return tag === "" ? "(untagged)" : tag;
}

export function metricsCells(row: MetricsRow): string[] {
  return [
    displayModel(row.model_tag),
    row.domain,
    formatLength(row.avg_conv_length),
    ...row.stage_pct.map(formatPercent),
    formatPercent(row.error_rate),
  ];
}

export function metricsTable(rows: MetricsRow[]): string[][] {
  return [Array.from(METRICS_COLUMNS), ...rows.map(metricsCells)];
}
