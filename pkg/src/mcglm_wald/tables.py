"""Result tables shared by ANOVA, MANOVA and multiple-comparison output."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field


@dataclass(frozen=True)
class TestRow:
    label: str
    df: int
    statistic: float
    p_value: float
    p_adjusted: float | None = None


@dataclass(frozen=True)
class TestTable:
    """Rows of (label, df, W, p-value) plus what kind of table it is."""

    rows: tuple
    kind: str
    type: str = ""
    hypotheses: tuple = field(default=(), compare=False, repr=False)

    __test__ = False  # keep pytest from collecting this class

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def row(self, label) -> TestRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    @property
    def has_adjusted(self) -> bool:
        return any(r.p_adjusted is not None for r in self.rows)

    def records(self):
        out = []
        for r in self.rows:
            rec = {"label": r.label, "df": r.df, "statistic": r.statistic, "p_value": r.p_value}
            if self.has_adjusted:
                rec["p_adjusted"] = r.p_adjusted
            out.append(rec)
        return out

    def to_csv(self) -> str:
        """Machine-readable CSV with full float precision."""
        buf = io.StringIO()
        recs = self.records()
        fields = ["label", "df", "statistic", "p_value"] + (["p_adjusted"] if self.has_adjusted else [])
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for rec in recs:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in rec.items()})
        return buf.getvalue()

    def format(self, title: str | None = None) -> str:
        """Fixed-width human-readable table."""
        head = ["Term", "Df", "Chi-square", "p-value"] + (["Adj. p-value"] if self.has_adjusted else [])
        body = []
        for r in self.rows:
            line = [r.label, str(r.df), f"{r.statistic:.4f}", format_p(r.p_value)]
            if self.has_adjusted:
                line.append(format_p(r.p_adjusted))
            body.append(line)
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        fmt = "  ".join(f"{{:<{w}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
        lines = []
        if title is None:
            title = f"{self.kind} (type {self.type})" if self.type else self.kind
        lines.append(title)
        lines.append(fmt.format(*head))
        lines.append("  ".join("-" * w for w in widths))
        lines.extend(fmt.format(*b) for b in body)
        return "\n".join(lines)


def format_p(p) -> str:
    if p is None:
        return ""
    if p < 0.01:
        return "<0.01"
    return f"{p:.4f}"


def read_table_csv(text: str):
    """Parse :meth:`TestTable.to_csv` output back into records."""
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        parsed = {"label": rec["label"], "df": int(rec["df"]),
                  "statistic": float(rec["statistic"]), "p_value": float(rec["p_value"])}
        if "p_adjusted" in rec:
            parsed["p_adjusted"] = float(rec["p_adjusted"])
        out.append(parsed)
    return out
