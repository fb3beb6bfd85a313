import type { ConsoleSnapshot, ConsoleState } from "./state.js";
import {
  chartGeometry,
  patientRows,
  recommendationRows,
  whatIfSummary,
} from "./viewmodel.js";

const SVG_NS = "http://www.w3.org/2000/svg";

/** DOM renderer: one render() per state emission, no retained widgets. */
export class ConsoleView {
  constructor(
    private readonly root: HTMLElement,
    private readonly state: ConsoleState,
  ) {}

  render(snap: ConsoleSnapshot): void {
    this.root.replaceChildren(
      this.errorBanner(snap),
      this.patientPanel(snap),
      this.detailPanel(snap),
    );
  }

  private errorBanner(snap: ConsoleSnapshot): HTMLElement {
    const div = document.createElement("div");
    div.className = "error-banner";
    if (snap.error) {
      div.textContent = `server error: ${snap.error}`;
      const retry = document.createElement("button");
      retry.textContent = "retry";
      retry.onclick = () => void this.state.loadPatients();
      div.append(" ", retry);
    } else {
      div.style.display = "none";
    }
    return div;
  }

  private patientPanel(snap: ConsoleSnapshot): HTMLElement {
    const panel = document.createElement("section");
    panel.className = "patients";
    const heading = document.createElement("h2");
    heading.textContent = "Patients";
    panel.append(heading);
    const rows = patientRows(snap.patients);
    if (!rows.length) {
      const empty = document.createElement("p");
      empty.className = "empty";
      empty.textContent = "No patients loaded.";
      panel.append(empty);
      return panel;
    }
    const list = document.createElement("ul");
    for (const row of rows) {
      const li = document.createElement("li");
      li.className = `tier-${row.tier}`;
      li.dataset.patient = row.id;
      if (row.id === snap.selectedPatient) li.classList.add("selected");
      li.textContent = `${row.id} — risk ${row.risk}`;
      li.onclick = () => void this.state.selectPatient(row.id);
      list.append(li);
    }
    panel.append(list);
    return panel;
  }

  private detailPanel(snap: ConsoleSnapshot): HTMLElement {
    const panel = document.createElement("section");
    panel.className = "detail";
    if (!snap.trajectory) return panel;

    panel.append(this.chart(snap));
    panel.append(this.whatIfPanel(snap));
    return panel;
  }

  private chart(snap: ConsoleSnapshot): SVGSVGElement {
    const geo = chartGeometry(snap.trajectory!, snap.whatIf, snap.selectedHour);
    const svg = document.createElementNS(SVG_NS, "svg");
    svg.setAttribute("viewBox", `0 0 ${geo.width} ${geo.height}`);
    svg.setAttribute("class", "trajectory");

    const band = document.createElementNS(SVG_NS, "path");
    band.setAttribute("d", geo.bandPath);
    band.setAttribute("class", "band");
    svg.append(band);

    if (geo.previewBandPath) {
      const preview = document.createElementNS(SVG_NS, "path");
      preview.setAttribute("d", geo.previewBandPath);
      preview.setAttribute("class", "band-preview");
      svg.append(preview);
    }

    const line = document.createElementNS(SVG_NS, "path");
    line.setAttribute("d", geo.riskPath);
    line.setAttribute("class", "risk-line");
    svg.append(line);

    for (const h of snap.trajectory!.hours) {
      const x = geo.hourX(h.hour);
      const dot = document.createElementNS(SVG_NS, "circle");
      dot.setAttribute("cx", x.toFixed(1));
      dot.setAttribute("cy", "6");
      dot.setAttribute("r", h.hour === snap.selectedHour ? "5" : "3");
      dot.setAttribute("class", "hour-cursor");
      dot.addEventListener("click", () => void this.state.selectHour(h.hour));
      svg.append(dot);
    }
    return svg;
  }

  private whatIfPanel(snap: ConsoleSnapshot): HTMLElement {
    const panel = document.createElement("div");
    panel.className = "whatif";
    const heading = document.createElement("h3");
    heading.textContent = `Lab ordering — hour ${snap.selectedHour}`;
    panel.append(heading);

    const list = document.createElement("table");
    for (const row of recommendationRows(snap.recommendations, snap.staged)) {
      const tr = document.createElement("tr");
      const toggle = document.createElement("input");
      toggle.type = "checkbox";
      toggle.checked = row.staged;
      toggle.onchange = () => this.state.toggleStaged(row.variable);
      const cell0 = document.createElement("td");
      cell0.append(toggle);
      tr.append(cell0);
      for (const text of [row.variable, row.reduction, row.mu, row.sigma]) {
        const td = document.createElement("td");
        td.textContent = text;
        tr.append(td);
      }
      list.append(tr);
    }
    panel.append(list);

    if (snap.whatIf) {
      const summary = whatIfSummary(snap.whatIf);
      const p = document.createElement("p");
      p.className = "whatif-summary";
      p.textContent =
        `band ${summary.widthBefore.toFixed(3)} → ` +
        `${summary.widthAfter.toFixed(3)}`;
      panel.append(p);
    }

    const order = document.createElement("button");
    order.textContent = "Order labs";
    order.disabled = snap.staged.length === 0;
    order.onclick = () => {
      // ordering sends each staged lab for measurement; the measured value
      // arrives from the lab system — here the user supplies it
      const values = new Map<string, number>();
      for (const name of snap.staged) {
        const raw = window.prompt(`measured value for ${name}?`);
        if (raw !== null && raw !== "") values.set(name, Number(raw));
      }
      void this.state.orderStagedLabs(values);
    };
    panel.append(order);
    return panel;
  }
}
