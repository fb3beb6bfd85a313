import type {
  PatientSummary,
  Recommendations,
  Trajectory,
  WhatIfResponse,
} from "./types.js";

export type FetchLike = (
  input: string,
  init?: RequestInit,
) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

/** Thin typed client over the console endpoints; the transport is
 * injectable so tests can replay recorded fixtures. */
export class ConsoleApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (input, init) =>
      fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    const body = await res.json();
    if (!res.ok) {
      throw new ApiError(res.status, body.code ?? "error", body.message ?? "");
    }
    return body as T;
  }

  patients(): Promise<PatientSummary[]> {
    return this.request("/patients");
  }

  trajectory(patientId: string): Promise<Trajectory> {
    return this.request(`/patients/${patientId}/trajectory`);
  }

  recommendations(
    patientId: string,
    hour: number,
    top = 5,
  ): Promise<Recommendations> {
    return this.request(
      `/patients/${patientId}/recommendations?hour=${hour}&top=${top}`,
    );
  }

  whatIf(
    patientId: string,
    hour: number,
    variables: string[],
  ): Promise<WhatIfResponse> {
    return this.request(`/patients/${patientId}/whatif`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ hour, variables }),
    });
  }

  observe(
    patientId: string,
    hour: number,
    variable: string,
    value: number,
  ): Promise<Trajectory> {
    return this.request(`/patients/${patientId}/observe`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ hour, variable, value }),
    });
  }
}
