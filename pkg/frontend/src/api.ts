/**
 * Thin typed client for the daemon's /v1 JSON API.
 *
 * The panel is a pure client: every request carries only the shared
 * bearer token and small JSON bodies of known fields. Nothing here can
 * construct a request for media bytes or key material because no such
 * endpoint exists and no such field is ever sent.
 */

export interface ApiResult {
  ok: boolean;
  status: number;
  body: any;
  networkError: boolean;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly token: string,
    private readonly fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private headers(): Record<string, string> {
    return {
      "Authorization": `Bearer ${this.token}`,
      "Content-Type": "application/json",
    };
  }

  private async run(url: string, init: RequestInit): Promise<ApiResult> {
    try {
      const resp = await this.fetchFn(url, init);
      let body: any = null;
      try {
        body = await resp.json();
      } catch {
        body = null;
      }
      return { ok: resp.ok, status: resp.status, body, networkError: false };
    } catch {
      return { ok: false, status: 0, body: null, networkError: true };
    }
  }

  get(path: string): Promise<ApiResult> {
    return this.run(`${this.baseUrl}/v1${path}`, {
      method: "GET",
      headers: this.headers(),
    });
  }

  post(path: string, body?: object): Promise<ApiResult> {
    return this.run(`${this.baseUrl}/v1${path}`, {
      method: "POST",
      headers: this.headers(),
      body: JSON.stringify(body ?? {}),
    });
  }
}
