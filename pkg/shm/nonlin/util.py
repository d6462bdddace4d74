import html
import json

import numpy as np
from IPython.display import HTML, display


class MalformedFile(ValueError):
    """A persisted artifact could not be read back.

    Attributes:
        path: File that failed to parse
        position: Human-readable location of the problem (``"line 3, column 7"``,
            ``"row 12"``, ``"key 'weights_out'"``), or None
    """

    def __init__(self, path, message, position=None):
        self.path = path
        self.position = position
        where = f" at {position}" if position else ""
        super().__init__(f"{path}{where}: {message}")


def fmt_number(x, digits=4):
    if isinstance(x, (float, np.floating)):
        if np.isnan(x):
            return "nan"
        return f"{x:.{digits}g}"
    return str(x)


def format_table(rows, headings=None):
    def fmt(x):
        if hasattr(x, "_repr_html_"):
            return x._repr_html_()
        elif hasattr(x, "_repr_svg_"):
            return x._repr_svg_()
        else:
            return f"<pre>{html.escape(fmt_number(x))}</pre>"

    return (
        "<table>"
        + (
            '<tr style="font-weight: bold;">'
            + "".join(f"<td>{html.escape(str(x))}</td>" for x in headings)
            + "</tr>"
            if headings
            else ""
        )
        + "".join(
            "<tr>" + "".join(f"<td>{fmt(x)}</td>" for x in row) + " </tr>"
            for row in rows
        )
        + "</table>"
    )


def display_table(*args, **kwargs):
    return display(HTML(format_table(*args, **kwargs)))


def text_table(rows, headings):
    "Fixed-width plain-text rendering of `rows` for terminals."
    cells = [[str(h) for h in headings]] + [[fmt_number(x) for x in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headings))]
    lines = []
    for k, row in enumerate(cells):
        lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def read_json(path):
    "Load a JSON sidecar, converting decode errors into `MalformedFile`."
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise MalformedFile(path, e.msg, f"line {e.lineno}, column {e.colno}") from e


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    return path
