// Wire types for the decision service's JSON API (schema_version 1).
// Field names follow the service payloads exactly; everything here is
// what the server sends, never derived client-side.

export type ActionKind = "NOTHING" | "EAT" | "INJECT";

export interface ActionView {
  type: ActionKind;
  carbs: number;
  insulin: number;
  slot: number;
}

/** [slot, kind, magnitude] — kind is "carb" or "bolus". */
export type AppliedEvent = [number, string, number];

export interface GlycemicBlock {
  tir_pct: number;
  tar_pct: number;
  tbr_pct: number;
  cv_pct: number;
}

export interface DaySummary {
  glycemic: GlycemicBlock;
  profile: Record<string, number>;
  reference_profile: Record<string, number> | null;
}

export interface SessionSummary {
  schema_version: number;
  session_id: string;
  subject: string;
  policy: string;
  seed: number;
  decision_step: number;
  clock_hour: number;
  done: boolean;
  glucose_history: number[];
  carbs_history: number[];
  bolus_history: number[];
  hour_history: number[];
  running_tir: number | null;
  running_tbr: number | null;
  running_tar: number | null;
  running_cv: number | null;
  created_at: string;
  day_summary?: DaySummary;
}

export interface Recommendation {
  schema_version: number;
  action: ActionView;
  raw: number[];
  rationale: {
    reward_scaled: number;
    reward_breakdown: Record<string, number>;
  };
}

export interface StepResponse {
  schema_version: number;
  decision_step: number;
  clock_hour: number;
  done: boolean;
  action: ActionView;
  forecast: number[];
  reward_scaled: number;
  reward_breakdown: Record<string, number>;
  applied_events: AppliedEvent[];
  running_tir: number | null;
  running_tbr: number | null;
  running_tar: number | null;
  running_cv: number | null;
  day_summary?: DaySummary;
}

export interface TrajectoryStep {
  decision_step: number;
  clock_hour: number;
  reward_scaled: number;
  reward_breakdown: Record<string, number>;
  done: boolean;
  forecast: number[];
  applied_events: AppliedEvent[];
  raw_action: number[];
  action: ActionView;
  running_tir: number | null;
}

export interface TrajectoryResponse {
  schema_version: number;
  session_id: string;
  initial: {
    glucose_history: number[];
    carbs_history: number[];
    bolus_history: number[];
    hour_history: number[];
  };
  steps: TrajectoryStep[];
}

export interface HealthResponse {
  status: string;
  schema_version: number;
  subjects: string[];
  policies: string[];
  sessions: number;
}

export interface PoliciesResponse {
  schema_version: number;
  policies: string[];
}

export interface CreateSessionBody {
  subject: string;
  seed: number;
  policy: string;
  initial_state_index?: number;
}

export interface OverrideBody {
  type: ActionKind;
  magnitude: number | null;
  slot: number;
}

export interface StepBody {
  accept?: boolean;
  override?: OverrideBody;
}
