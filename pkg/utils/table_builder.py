# utils/table_builder.py
import csv
import io
from typing import Any, List, Sequence


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


class TableBuilder:
    """把结果行输出为对齐的纯文本表与 CSV"""

    @staticmethod
    def text_table(header: Sequence[str], rows: Sequence[Sequence[Any]],
                   comments: Sequence[str] = ()) -> str:
        cells = [[str(h) for h in header]] + [[_cell(v) for v in row] for row in rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
        lines = []
        for index, row in enumerate(cells):
            lines.append('  '.join(value.rjust(width) for value, width in zip(row, widths)).rstrip())
            if index == 0:
                lines.append('  '.join('-' * width for width in widths))
        lines.extend(f"# {comment}" for comment in comments)
        return '\n'.join(lines) + '\n'

    @staticmethod
    def csv_table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
        return buffer.getvalue()

    @staticmethod
    def matrix_csv(matrix) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])
        return buffer.getvalue()


def map_columns(thresholds: Sequence[float]) -> List[str]:
    """map@0.3 这样的列名"""
    return [f"map@{t:g}" for t in thresholds]
