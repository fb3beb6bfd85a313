import { ConsoleApi } from "./api.js";
import type {
  PatientSummary,
  Recommendations,
  Trajectory,
  WhatIfResponse,
} from "./types.js";

export interface ConsoleSnapshot {
  patients: PatientSummary[];
  selectedPatient: string | null;
  selectedHour: number | null;
  trajectory: Trajectory | null;
  recommendations: Recommendations | null;
  staged: string[];
  whatIf: WhatIfResponse | null;
  pendingWhatIf: boolean;
  error: string | null;
}

const WHATIF_DEBOUNCE_MS = 300;

type Scheduler = (fn: () => void, ms: number) => unknown;
type Canceller = (handle: unknown) => void;

/** Client-side console state.
 *
 * Every number shown on screen comes from a server response stored here.
 * What-if previews are debounced and sequence-numbered: out-of-order
 * responses are dropped, and an empty staged set always restores the
 * baseline (whatIf = null) without a server round trip.
 */
export class ConsoleState {
  private patients: PatientSummary[] = [];
  private selectedPatient: string | null = null;
  private selectedHour: number | null = null;
  private trajectory: Trajectory | null = null;
  private recommendations: Recommendations | null = null;
  private staged = new Set<string>();
  private whatIf: WhatIfResponse | null = null;
  private pendingWhatIf = false;
  private error: string | null = null;

  private whatIfSeq = 0;
  private debounceHandle: unknown = null;
  private listeners: Array<(snap: ConsoleSnapshot) => void> = [];

  constructor(
    private readonly api: ConsoleApi,
    private readonly schedule: Scheduler = (fn, ms) => setTimeout(fn, ms),
    private readonly cancel: Canceller = (h) =>
      clearTimeout(h as ReturnType<typeof setTimeout>),
  ) {}

  subscribe(fn: (snap: ConsoleSnapshot) => void): void {
    this.listeners.push(fn);
  }

  snapshot(): ConsoleSnapshot {
    return {
      patients: this.patients,
      selectedPatient: this.selectedPatient,
      selectedHour: this.selectedHour,
      trajectory: this.trajectory,
      recommendations: this.recommendations,
      staged: [...this.staged].sort(),
      whatIf: this.whatIf,
      pendingWhatIf: this.pendingWhatIf,
      error: this.error,
    };
  }

  private emit(): void {
    const snap = this.snapshot();
    for (const fn of this.listeners) fn(snap);
  }

  async loadPatients(): Promise<void> {
    try {
      this.patients = await this.api.patients();
      this.error = null;
    } catch (err) {
      this.error = String(err);
    }
    this.emit();
  }

  async selectPatient(id: string): Promise<void> {
    this.selectedPatient = id;
    this.staged.clear();
    this.whatIf = null;
    this.trajectory = null;
    this.recommendations = null;
    try {
      this.trajectory = await this.api.trajectory(id);
      this.selectedHour = this.trajectory.hours.length - 1;
      this.error = null;
    } catch (err) {
      this.error = String(err);
      this.emit();
      return;
    }
    this.emit();
    await this.refreshRecommendations();
  }

  async selectHour(hour: number): Promise<void> {
    if (!this.trajectory) return;
    this.selectedHour = hour;
    this.staged.clear();
    this.whatIf = null;
    this.emit();
    await this.refreshRecommendations();
  }

  private async refreshRecommendations(): Promise<void> {
    if (this.selectedPatient === null || this.selectedHour === null) return;
    try {
      this.recommendations = await this.api.recommendations(
        this.selectedPatient,
        this.selectedHour,
      );
      this.error = null;
    } catch (err) {
      this.error = String(err);
    }
    this.emit();
  }

  /** Variables unobserved at the selected hour (the stageable set). */
  unobservedAtSelectedHour(): Set<string> {
    const rec = this.recommendations;
    return new Set(rec ? rec.items.map((i) => i.variable) : []);
  }

  toggleStaged(variable: string): void {
    if (this.staged.has(variable)) {
      this.staged.delete(variable);
    } else {
      if (!this.unobservedAtSelectedHour().has(variable)) return;
      this.staged.add(variable);
    }
    this.scheduleWhatIf();
    this.emit();
  }

  private scheduleWhatIf(): void {
    if (this.debounceHandle !== null) {
      this.cancel(this.debounceHandle);
      this.debounceHandle = null;
    }
    if (this.staged.size === 0) {
      // untoggling everything restores the baseline band exactly
      this.whatIf = null;
      this.pendingWhatIf = false;
      this.whatIfSeq++;
      return;
    }
    this.pendingWhatIf = true;
    this.debounceHandle = this.schedule(() => {
      void this.fireWhatIf();
    }, WHATIF_DEBOUNCE_MS);
  }

  private async fireWhatIf(): Promise<void> {
    if (this.selectedPatient === null || this.selectedHour === null) return;
    const seq = ++this.whatIfSeq;
    try {
      const res = await this.api.whatIf(
        this.selectedPatient,
        this.selectedHour,
        [...this.staged].sort(),
      );
      if (seq !== this.whatIfSeq) return; // a newer request superseded this one
      this.whatIf = res;
      this.pendingWhatIf = false;
      this.error = null;
    } catch (err: unknown) {
      if (seq !== this.whatIfSeq) return;
      this.pendingWhatIf = false;
      const apiErr = err as { status?: number; message?: string };
      if (apiErr.status === 409) {
        // the server says one of the staged items is already observed;
        // drop stale staging and refresh the offer list
        this.staged.clear();
        this.whatIf = null;
        await this.refreshRecommendations();
      } else {
        this.error = String(err);
      }
    }
    this.emit();
  }

  /** Order every staged lab: persist observations, then refresh. */
  async orderStagedLabs(values: Map<string, number>): Promise<void> {
    if (this.selectedPatient === null || this.selectedHour === null) return;
    const staged = [...this.staged].sort();
    for (const variable of staged) {
      const value = values.get(variable);
      if (value === undefined) continue;
      try {
        this.trajectory = await this.api.observe(
          this.selectedPatient,
          this.selectedHour,
          variable,
          value,
        );
      } catch (err: unknown) {
        const apiErr = err as { status?: number };
        if (apiErr.status !== 409) {
          this.error = String(err);
          break;
        }
      }
    }
    this.staged.clear();
    this.whatIf = null;
    this.emit();
    await this.refreshRecommendations();
  }
}
