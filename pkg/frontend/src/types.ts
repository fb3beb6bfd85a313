/** Server payload shapes. The console renders these verbatim; it never
 * recomputes risk or uncertainty on its own. */

export type RiskTier = "green" | "yellow" | "red";

export interface PatientSummary {
  id: string;
  latest_risk: number;
  latest_U: number;
  risk_tier: RiskTier;
}

export interface TrajectoryHour {
  hour: number;
  risk: number;
  U_x: number;
  U_w: number;
  band_low: number;
  band_high: number;
  observed: string[];
}

export interface Trajectory {
  patient_id: string;
  hours: TrajectoryHour[];
}

export interface RecommendationItem {
  variable: string;
  expected_reduction: number;
  mu: number;
  sigma: number;
}

export interface Recommendations {
  patient_id: string;
  hour: number;
  items: RecommendationItem[];
}

export interface WhatIfSide {
  risk: number;
  U_x: number;
  U_w: number;
  band_low: number;
  band_high: number;
}

export interface WhatIfResponse {
  patient_id: string;
  hour: number;
  before: WhatIfSide;
  after: WhatIfSide;
}

export interface ApiErrorBody {
  code: string;
  message: string;
}
