"""Evaluation machinery: task records, run traces, scoring and transcript rewriting."""

from __future__ import annotations

import copy
import json
import threading
import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Literal, Union

from .errors import DataError, IncompatibleFormatError, TranscriptError
from .registry import FORMAT_VERSION, dump_line

GATEWAY_TOOLS = frozenset({"tool_finder", "call_tool"})
# OpenHands CodeAct's local tools; never rewritten.
DEFAULT_LOCAL_TOOLS = frozenset(
    {"execute_bash", "execute_ipython_cell", "str_replace_editor", "think", "finish", "fetch", "web_read"}
)
COMPLETION_ONLY_CATEGORIES = frozenset({"primitive", "composite"})

Category = Literal["primitive", "composite", "tac"]


@dataclass(frozen=True)
class TaskRecord:
    task_id: str
    description: str
    oracle_tools: frozenset[str]
    checkpoints: tuple[tuple[str, float], ...] = ()
    category: Category | None = None
    completion_only: bool | None = None

    def __post_init__(self) -> None:
        if not self.oracle_tools:
            raise DataError(f"task {self.task_id}: oracle tool set is empty")
        ids = [c for c, _ in self.checkpoints]
        if len(set(ids)) != len(ids):
            raise DataError(f"task {self.task_id}: duplicate checkpoint ids")
        for cid, w in self.checkpoints:
            if not w > 0:
                raise DataError(f"task {self.task_id}: checkpoint {cid} has non-positive weight {w}")

    @property
    def scored_on_completion_only(self) -> bool:
        if self.completion_only is not None:
            return self.completion_only
        return self.category in COMPLETION_ONLY_CATEGORIES

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TaskRecord:
        cps = []
        for c in d.get("checkpoints", []):
            if isinstance(c, dict):
                cps.append((str(c["id"]), float(c.get("weight", 1.0))))
            else:
                cps.append((str(c), 1.0))
        return cls(
            task_id=str(d["task_id"]),
            description=str(d.get("description", "")),
            oracle_tools=frozenset(d.get("oracle_tools", [])),
            checkpoints=tuple(cps),
            category=d.get("category"),
            completion_only=d.get("completion_only"),
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "task_id": self.task_id,
            "description": self.description,
            "oracle_tools": sorted(self.oracle_tools),
            "checkpoints": [{"id": c, "weight": w} for c, w in self.checkpoints],
            "category": self.category,
        }
        if self.completion_only is not None:
            out["completion_only"] = self.completion_only
        return out


def load_task(path: str | Path) -> TaskRecord:
    return TaskRecord.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# traces


@dataclass(frozen=True)
class FinderEvent:
    query: str
    hits: tuple[str, ...]


@dataclass(frozen=True)
class CallEvent:
    tool: str
    ok: bool


@dataclass(frozen=True)
class StepEvent:
    pass


Event = Union[FinderEvent, CallEvent, StepEvent]


@dataclass
class RunTrace:
    task_id: str
    events: list[Event] = field(default_factory=list)
    completed: bool = False
    checkpoints_earned: set[str] = field(default_factory=set)
    token_cost: float | None = None


def _event_from_dict(rec: dict[str, Any], line: int) -> Event | None:
    kind = rec.get("type")
    if kind == "finder":
        return FinderEvent(str(rec.get("query", "")), tuple(rec.get("hits", [])))
    if kind == "call":
        return CallEvent(str(rec["tool"]), bool(rec["ok"]))
    if kind == "step":
        return StepEvent()
    if kind in ("header", "completion"):
        return None
    raise DataError(f"trace line {line}: unknown event type {kind!r}")


def read_trace(path: str | Path, task_id: str | None = None) -> RunTrace:
    """Load a trace file: versioned header, then one JSON event per line.

    Completion markers (``{"type": "completion", ...}``) set the outcome
    fields; the last one wins.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    trace = RunTrace(task_id or "")
    seen_header = False
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except ValueError as exc:
            raise DataError(f"{path}:{i}: invalid JSON") from exc
        if rec.get("type") == "header":
            if rec.get("format_version") != FORMAT_VERSION:
                raise IncompatibleFormatError(f"{path}: trace format_version {rec.get('format_version')} unsupported")
            seen_header = True
            trace.task_id = task_id or str(rec.get("task_id") or trace.task_id)
        elif rec.get("type") == "completion":
            trace.completed = bool(rec.get("completed", False))
            trace.checkpoints_earned = set(rec.get("checkpoints_earned", []))
            trace.token_cost = rec.get("token_cost")
            trace.task_id = task_id or str(rec.get("task_id") or trace.task_id)
        else:
            try:
                ev = _event_from_dict(rec, i)
            except KeyError as exc:
                raise DataError(f"{path}:{i}: event missing field {exc}") from exc
            if ev is not None:
                trace.events.append(ev)
    if not seen_header:
        raise DataError(f"{path}: trace has no header record")
    return trace


def write_trace(trace: RunTrace, path: str | Path) -> None:
    with TraceWriter(path, task_id=trace.task_id, timestamps=False) as w:
        for ev in trace.events:
            if isinstance(ev, FinderEvent):
                w.finder(ev.query, list(ev.hits))
            elif isinstance(ev, CallEvent):
                w.call(ev.tool, ev.ok)
            else:
                w.step()
        w.completion(trace.completed, sorted(trace.checkpoints_earned), trace.token_cost)


class TraceWriter:
    """Thread-safe NDJSON event log shared by all gateway sessions."""

    def __init__(self, target: str | Path | IO[str], task_id: str | None = None, timestamps: bool = True):
        if isinstance(target, (str, Path)):
            self._fh: IO[str] = open(target, "w", encoding="utf-8")
            self._owned = True
        else:
            self._fh, self._owned = target, False
        self.timestamps = timestamps
        self._lock = threading.Lock()
        self._write({"type": "header", "format_version": FORMAT_VERSION, "task_id": task_id})

    def _write(self, rec: dict[str, Any]) -> None:
        if self.timestamps and rec.get("type") != "header":
            rec = {"ts": round(time.time(), 6), **rec}
        with self._lock:
            self._fh.write(dump_line(rec) + "\n")
            self._fh.flush()

    def finder(self, query: str, hits: list[str], session: str | None = None) -> None:
        self._write({"type": "finder", "query": query, "hits": hits, **({"session": session} if session else {})})

    def call(self, tool: str, ok: bool, status: str | None = None, session: str | None = None) -> None:
        rec: dict[str, Any] = {"type": "call", "tool": tool, "ok": ok}
        if status:
            rec["status"] = status
        if session:
            rec["session"] = session
        self._write(rec)

    def step(self) -> None:
        self._write({"type": "step"})

    def completion(self, completed: bool, checkpoints_earned: list[str], token_cost: float | None = None) -> None:
        self._write({"type": "completion", "completed": completed, "checkpoints_earned": checkpoints_earned, "token_cost": token_cost})

    def close(self) -> None:
        if self._owned:
            self._fh.close()

    def __enter__(self) -> TraceWriter:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class RunStats:
    steps: int = 0
    finder_calls: int = 0
    tools_retrieved_distinct: int = 0
    call_attempts: int = 0
    failed_calls: int = 0
    retrieval_recall: float = 0.0
    mean_query_length: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def _check_pair(task: TaskRecord, trace: RunTrace) -> None:
    if trace.task_id != task.task_id:
        raise DataError(f"trace for {trace.task_id!r} does not belong to task {task.task_id!r}")


def score_task(task: TaskRecord, trace: RunTrace) -> float:
    """Half the score from checkpoint credit, half from completion.

    Completion-only tasks score 1 or 0.  A task without checkpoints is
    scored on completion alone.
    """
    _check_pair(task, trace)
    declared = {c for c, _ in task.checkpoints}
    unknown = trace.checkpoints_earned - declared
    if unknown:
        raise DataError(f"task {task.task_id}: earned undeclared checkpoints {sorted(unknown)}")
    done = 1.0 if trace.completed else 0.0
    if task.scored_on_completion_only or not task.checkpoints:
        return done
    total = sum(w for _, w in task.checkpoints)
    earned = sum(w for c, w in task.checkpoints if c in trace.checkpoints_earned)
    return 0.5 * (earned / total) + 0.5 * done


def retrieved_tools(trace: RunTrace) -> set[str]:
    return {h for ev in trace.events if isinstance(ev, FinderEvent) for h in ev.hits}


def retrieval_recall(task: TaskRecord, trace: RunTrace) -> float:
    _check_pair(task, trace)
    return len(retrieved_tools(trace) & task.oracle_tools) / len(task.oracle_tools)


def compute_run_stats(trace: RunTrace, task: TaskRecord | None = None) -> RunStats:
    finders = [ev for ev in trace.events if isinstance(ev, FinderEvent)]
    calls = [ev for ev in trace.events if isinstance(ev, CallEvent)]
    return RunStats(
        steps=sum(1 for ev in trace.events if isinstance(ev, StepEvent)),
        finder_calls=len(finders),
        tools_retrieved_distinct=len(retrieved_tools(trace)),
        call_attempts=len(calls),
        failed_calls=sum(1 for c in calls if not c.ok),
        retrieval_recall=retrieval_recall(task, trace) if task is not None else 0.0,
        mean_query_length=(sum(len(f.query.split()) for f in finders) / len(finders)) if finders else 0.0,
    )


# ---------------------------------------------------------------------------
# transcript post-processing


@dataclass
class RewriteResult:
    messages: list[Any]
    rewrites: int
    changed: list[bool]


def _call_parts(call: Any, mi: int, ci: int) -> tuple[str, Any, bool]:
    """(name, parsed arguments, arguments-are-a-JSON-string) of one tool call."""
    if not isinstance(call, dict):
        raise TranscriptError("tool call entry must be an object", mi, ci)
    fn = call.get("function") if isinstance(call.get("function"), dict) else call
    name = fn.get("name")
    if not isinstance(name, str) or not name:
        raise TranscriptError("tool call has no name", mi, ci)
    args = fn.get("arguments", {})
    if isinstance(args, str):
        try:
            return name, json.loads(args) if args.strip() else {}, True
        except ValueError as exc:
            raise TranscriptError(f"tool call {name!r} has non-JSON arguments", mi, ci) from exc
    if not isinstance(args, dict):
        raise TranscriptError(f"tool call {name!r} arguments must be an object", mi, ci)
    return name, args, False


def _rewrite_call(call: dict[str, Any], name: str, args: Any, as_string: bool) -> dict[str, Any]:
    new = copy.deepcopy(call)
    target = new["function"] if isinstance(new.get("function"), dict) else new
    wrapped = {"tool_name": name, "arguments": args}
    target["name"] = "call_tool"
    target["arguments"] = json.dumps(wrapped, ensure_ascii=False) if as_string else wrapped
    return new


def postprocess_transcript(
    messages: Sequence[Any],
    upstream_tools: Iterable[str],
    local_tools: Iterable[str] = DEFAULT_LOCAL_TOOLS,
) -> RewriteResult:
    """Rewrite direct calls to upstream tools into ``call_tool`` calls.

    Tool calls are read from each message's ``tool_calls`` list, in either
    ``{"name", "arguments"}`` or OpenAI ``{"function": {...}}`` shape.
    Messages without a rewrite are returned as the same objects.
    """
    upstream = set(upstream_tools)
    local = set(local_tools)
    out: list[Any] = []
    changed: list[bool] = []
    count = 0
    for mi, msg in enumerate(messages):
        calls = msg.get("tool_calls") if isinstance(msg, dict) else None
        if calls is None:
            out.append(msg)
            changed.append(False)
            continue
        if not isinstance(calls, list):
            raise TranscriptError("tool_calls must be a list", mi)
        new_calls = []
        hit = False
        for ci, call in enumerate(calls):
            name, args, as_string = _call_parts(call, mi, ci)
            if name in upstream and name not in GATEWAY_TOOLS and name not in local:
                new_calls.append(_rewrite_call(call, name, args, as_string))
                hit = True
                count += 1
            else:
                new_calls.append(call)
        if hit:
            msg = {**msg, "tool_calls": new_calls}
        out.append(msg)
        changed.append(hit)
    return RewriteResult(out, count, changed)


def reachable_calls(messages: Sequence[Any], upstream_tools: Iterable[str]) -> list[tuple[str, str]]:
    """(tool, canonical-args) pairs that reach upstream tools, directly or via call_tool."""
    upstream = set(upstream_tools)
    pairs = []
    for mi, msg in enumerate(messages):
        for ci, call in enumerate((msg.get("tool_calls") or []) if isinstance(msg, dict) else []):
            name, args, _ = _call_parts(call, mi, ci)
            if name == "call_tool" and isinstance(args, dict) and "tool_name" in args:
                pairs.append((str(args["tool_name"]), dump_line(args.get("arguments", {}))))
            elif name in upstream and name not in GATEWAY_TOOLS:
                pairs.append((name, dump_line(args)))
    return sorted(pairs)


def postprocess_jsonl(text: str, upstream_tools: Iterable[str], local_tools: Iterable[str] = DEFAULT_LOCAL_TOOLS) -> tuple[str, int]:
    """Line-oriented variant: untouched lines are emitted byte-for-byte."""
    raw_lines = text.splitlines(keepends=True)
    parsed = []
    for i, line in enumerate(raw_lines):
        if not line.strip():
            parsed.append(None)
            continue
        try:
            parsed.append(json.loads(line))
        except ValueError as exc:
            raise TranscriptError("message is not valid JSON", i) from exc
    msgs = [p if p is not None else {} for p in parsed]
    result = postprocess_transcript(msgs, upstream_tools, local_tools)
    out = []
    for line, new, hit in zip(raw_lines, result.messages, result.changed):
        if hit:
            ending = "\n" if line.endswith("\n") else ""
            out.append(json.dumps(new, ensure_ascii=False) + ending)
        else:
            out.append(line)
    return "".join(out), result.rewrites


# ---------------------------------------------------------------------------
# reporting


@dataclass(frozen=True)
class ReportRow:
    label: str
    tasks: int
    score: float
    completed_pct: float
    mean_steps: float
    mean_cost: float | None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def _row(label: str, pairs: list[tuple[TaskRecord, RunTrace]]) -> ReportRow:
    n = len(pairs)
    scores = [score_task(t, r) for t, r in pairs]
    steps = [compute_run_stats(r).steps for _, r in pairs]
    costs = [r.token_cost for _, r in pairs if r.token_cost is not None]
    return ReportRow(
        label=label,
        tasks=n,
        score=100.0 * sum(scores) / n,
        completed_pct=100.0 * sum(1 for _, r in pairs if r.completed) / n,
        mean_steps=sum(steps) / n,
        mean_cost=(sum(costs) / len(costs)) if costs else None,
    )


@dataclass(frozen=True)
class Report:
    overall: ReportRow
    by_category: list[ReportRow]
    per_task: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "overall": self.overall.to_dict(),
            "by_category": [r.to_dict() for r in self.by_category],
            "tasks": self.per_task,
        }

    def to_text(self) -> str:
        header = ("group", "tasks", "score", "completed %", "mean steps", "mean cost")
        rows = [header]
        for r in [self.overall, *self.by_category]:
            cost = "-" if r.mean_cost is None else f"{r.mean_cost:.2f}"
            rows.append((r.label, str(r.tasks), f"{r.score:.2f}", f"{r.completed_pct:.2f}", f"{r.mean_steps:.2f}", cost))
        widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
        lines = []
        for j, row in enumerate(rows):
            cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
            lines.append("  ".join(cells).rstrip())
            if j == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines)


def aggregate_report(tasks: Sequence[TaskRecord], traces: Sequence[RunTrace]) -> Report:
    by_id = {t.task_id: t for t in tasks}
    if len(by_id) != len(tasks):
        raise DataError("duplicate task ids")
    trace_ids = [r.task_id for r in traces]
    if sorted(trace_ids) != sorted(by_id):
        missing = sorted(set(by_id) - set(trace_ids))
        extra = sorted(set(trace_ids) - set(by_id))
        raise DataError(f"task/trace mismatch: missing traces {missing}, unmatched traces {extra}")
    pairs = [(by_id[r.task_id], r) for r in sorted(traces, key=lambda r: r.task_id)]
    if not pairs:
        raise DataError("no tasks to report on")
    cats: dict[str, list[tuple[TaskRecord, RunTrace]]] = {}
    for t, r in pairs:
        cats.setdefault(t.category or "uncategorised", []).append((t, r))
    per_task = []
    for t, r in pairs:
        stats = compute_run_stats(r, t)
        per_task.append({"task_id": t.task_id, "category": t.category, "score": score_task(t, r), "completed": r.completed, **stats.to_dict(), "token_cost": r.token_cost})
    return Report(_row("all", pairs), [_row(c, cats[c]) for c in sorted(cats)], per_task)
