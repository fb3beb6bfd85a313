import type {
  PatientSummary,
  Recommendations,
  Trajectory,
  WhatIfResponse,
} from "./types.js";

/** Pure projections from server payloads to what the screen shows.
 * No arithmetic on risks or uncertainties happens here beyond layout. */

export interface PatientRow {
  id: string;
  risk: string; // formatted from the server value, nothing recomputed
  riskValue: number;
  tier: string;
}

export function patientRows(patients: PatientSummary[]): PatientRow[] {
  const rows = patients.map((p) => ({
    id: p.id,
    risk: p.latest_risk.toFixed(3),
    riskValue: p.latest_risk,
    tier: p.risk_tier,
  }));
  // sort by risk descending; stable for equal risks (by original order)
  return rows
    .map((row, i) => ({ row, i }))
    .sort((a, b) => b.row.riskValue - a.row.riskValue || a.i - b.i)
    .map((x) => x.row);
}

export interface ChartGeometry {
  width: number;
  height: number;
  riskPath: string;
  bandPath: string;
  previewBandPath: string | null;
  hourX: (hour: number) => number;
  cursorHour: number | null;
}

function scaleX(hour: number, maxHour: number, width: number): number {
  const span = Math.max(maxHour, 1);
  return (hour / span) * (width - 20) + 10;
}

function scaleY(value: number, height: number): number {
  const v = Math.min(Math.max(value, 0), 1); // axis clamped to [0,1]
  return height - 12 - v * (height - 24);
}

/** Risk polyline plus the uncertainty band polygon; hours are gaps when
 * absent (no interpolation across missing hours). */
export function chartGeometry(
  trajectory: Trajectory,
  whatIf: WhatIfResponse | null,
  cursorHour: number | null,
  width = 640,
  height = 220,
): ChartGeometry {
  const hours = trajectory.hours;
  const maxHour = hours.length ? hours[hours.length - 1].hour : 1;
  const pieces: string[] = [];
  let previous: number | null = null;
  for (const h of hours) {
    const cmd = previous !== null && h.hour === previous + 1 ? "L" : "M";
    pieces.push(
      `${cmd}${scaleX(h.hour, maxHour, width).toFixed(1)},` +
        `${scaleY(h.risk, height).toFixed(1)}`,
    );
    previous = h.hour;
  }

  const upper = hours.map(
    (h) =>
      `${scaleX(h.hour, maxHour, width).toFixed(1)},` +
      `${scaleY(h.band_high, height).toFixed(1)}`,
  );
  const lower = [...hours]
    .reverse()
    .map(
      (h) =>
        `${scaleX(h.hour, maxHour, width).toFixed(1)},` +
        `${scaleY(h.band_low, height).toFixed(1)}`,
    );
  const bandPath = hours.length
    ? `M${upper.join(" L")} L${lower.join(" L")} Z`
    : "";

  let previewBandPath: string | null = null;
  if (whatIf && cursorHour !== null) {
    const x = scaleX(cursorHour, maxHour, width);
    const lo = scaleY(whatIf.after.band_low, height);
    const hi = scaleY(whatIf.after.band_high, height);
    previewBandPath =
      `M${(x - 6).toFixed(1)},${hi.toFixed(1)} H${(x + 6).toFixed(1)} ` +
      `V${lo.toFixed(1)} H${(x - 6).toFixed(1)} Z`;
  }

  return {
    width,
    height,
    riskPath: pieces.join(" "),
    bandPath,
    previewBandPath,
    hourX: (hour) => scaleX(hour, maxHour, width),
    cursorHour,
  };
}

export interface RecommendationRow {
  variable: string;
  reduction: string;
  mu: string;
  sigma: string;
  staged: boolean;
}

export function recommendationRows(
  recommendations: Recommendations | null,
  staged: string[],
): RecommendationRow[] {
  if (!recommendations) return [];
  const set = new Set(staged);
  return recommendations.items.map((item) => ({
    variable: item.variable,
    reduction: item.expected_reduction.toExponential(3),
    mu: item.mu.toFixed(2),
    sigma: item.sigma.toFixed(2),
    staged: set.has(item.variable),
  }));
}

export interface BandSummary {
  riskBefore: string;
  riskAfter: string;
  bandBefore: [number, number];
  bandAfter: [number, number];
  widthBefore: number;
  widthAfter: number;
}

export function whatIfSummary(whatIf: WhatIfResponse): BandSummary {
  return {
    riskBefore: whatIf.before.risk.toFixed(3),
    riskAfter: whatIf.after.risk.toFixed(3),
    bandBefore: [whatIf.before.band_low, whatIf.before.band_high],
    bandAfter: [whatIf.after.band_low, whatIf.after.band_high],
    widthBefore: whatIf.before.band_high - whatIf.before.band_low,
    widthAfter: whatIf.after.band_high - whatIf.after.band_low,
  };
}
