"""Operator review sessions: the four-condition study protocol.

A session walks one participant through the four assistance conditions in
a seeded random order, serving 12 balanced cases per condition.  Payload
visibility is enforced here, server-side: a condition's payload carries
exactly the AI fields that condition licenses, nothing else.  Every state
change is an append-only JSON-lines event, and exports are pure functions
of the event log.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    DependencyError,
    InvalidInputError,
    ProtocolError,
)
from .geometry import RegistrationLabel
from .metrics import (
    Category,
    balanced_subset,
    weighted_accuracy_observed,
)

CASES_PER_CATEGORY = 3  # x4 categories = 12 assessment tasks per condition


class StudyCondition(str, Enum):
    HUMAN_ONLY = "HUMAN_ONLY"
    AI_ONLY = "AI_ONLY"
    HUMAN_AI = "HUMAN_AI"
    HUMAN_XAI = "HUMAN_XAI"


ALL_CONDITIONS = (
    StudyCondition.HUMAN_ONLY,
    StudyCondition.AI_ONLY,
    StudyCondition.HUMAN_AI,
    StudyCondition.HUMAN_XAI,
)

TLX_SCALES = ("mental", "physical", "temporal", "performance", "effort", "frustration")
AI_EVAL_ITEMS = ("usefulness", "trust", "understanding")


@dataclass(frozen=True)
class StudyCase:
    """One scored case: images on disk plus the frozen AI verdict."""

    case_id: str
    xray_path: str  # relative to the dataset root
    drr_path: str
    heatmap_path: str | None  # relative to the pool directory
    ai_prediction: RegistrationLabel
    ai_probability: float  # probability of ACCEPT
    set_labels: tuple[str, ...]
    set_certain: bool
    set_fallback: bool
    actual: RegistrationLabel
    category: Category

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "xray_path": self.xray_path,
            "drr_path": self.drr_path,
            "heatmap_path": self.heatmap_path,
            "ai_prediction": self.ai_prediction.value,
            "ai_probability": self.ai_probability,
            "set_labels": list(self.set_labels),
            "set_certain": self.set_certain,
            "set_fallback": self.set_fallback,
            "actual": self.actual.value,
            "category": self.category.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudyCase":
        return cls(
            case_id=d["case_id"],
            xray_path=d["xray_path"],
            drr_path=d["drr_path"],
            heatmap_path=d.get("heatmap_path"),
            ai_prediction=RegistrationLabel(d["ai_prediction"]),
            ai_probability=d["ai_probability"],
            set_labels=tuple(d["set_labels"]),
            set_certain=d["set_certain"],
            set_fallback=d["set_fallback"],
            actual=RegistrationLabel(d["actual"]),
            category=Category(d["category"]),
        )


@dataclass
class StudyPool:
    """The scored case inventory sessions draw from."""

    cases: dict[str, StudyCase]
    data_root: str
    pool_dir: str | None = None
    image_dims: tuple[int, int] = (128, 128)

    def categories(self) -> dict[str, Category]:
        return {cid: c.category for cid, c in self.cases.items()}

    def save(self, path: Path) -> None:
        payload = {
            "data_root": self.data_root,
            "pool_dir": self.pool_dir,
            "image_dims": list(self.image_dims),
            "cases": [c.to_dict() for c in self.cases.values()],
        }
        Path(path).write_text(json.dumps(payload, indent=1))

    @classmethod
    def load(cls, path: Path) -> "StudyPool":
        path = Path(path)
        if not path.exists():
            raise DependencyError(
                [f"study pool {path} (build it with `regverify evaluate` or `regverify serve`)"]
            )
        payload = json.loads(path.read_text())
        cases = {c["case_id"]: StudyCase.from_dict(c) for c in payload["cases"]}
        return cls(
            cases=cases,
            data_root=payload["data_root"],
            pool_dir=payload.get("pool_dir"),
            image_dims=tuple(payload.get("image_dims", (128, 128))),
        )


@dataclass(frozen=True)
class DecisionRecord:
    session_id: str
    condition: StudyCondition
    case_id: str
    human_decision: RegistrationLabel | None  # None for AI_ONLY
    ai_payload: dict  # snapshot of the AI fields shown (empty for HUMAN_ONLY)
    ground_truth: RegistrationLabel
    category: Category
    latency_ms: float
    client_latency_ms: float | None
    timestamp: float

    @property
    def scored_decision(self) -> RegistrationLabel:
        """What gets compared against ground truth when scoring."""
        if self.human_decision is not None:
            return self.human_decision
        return RegistrationLabel(self.ai_payload["ai_prediction"])

    @property
    def correct(self) -> bool:
        return self.scored_decision is self.ground_truth

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "condition": self.condition.value,
            "case_id": self.case_id,
            "human_decision": self.human_decision.value if self.human_decision else None,
            "ai_payload": self.ai_payload,
            "ground_truth": self.ground_truth.value,
            "category": self.category.value,
            "latency_ms": self.latency_ms,
            "client_latency_ms": self.client_latency_ms,
            "timestamp": self.timestamp,
        }


@dataclass(frozen=True)
class SurveyResponse:
    session_id: str
    condition: StudyCondition
    tlx: dict[str, int]  # six scales, 0-100
    ai_items: dict[str, int]  # Likert 1-7; empty for HUMAN_ONLY
    free_text: str = ""

    def validate(self) -> None:
        if set(self.tlx) != set(TLX_SCALES):
            raise InvalidInputError(f"survey needs exactly the scales {TLX_SCALES}")
        for name, value in self.tlx.items():
            if not isinstance(value, int) or not 0 <= value <= 100:
                raise InvalidInputError(f"TLX scale {name!r} must be an integer in [0, 100]")
        if self.condition is StudyCondition.HUMAN_ONLY:
            if self.ai_items:
                raise InvalidInputError("AI-evaluation items are not allowed for HUMAN_ONLY")
            return
        for name, value in self.ai_items.items():
            if name not in AI_EVAL_ITEMS:
                raise InvalidInputError(f"unknown AI-evaluation item {name!r}")
            if not isinstance(value, int) or not 1 <= value <= 7:
                raise InvalidInputError(f"AI item {name!r} must be an integer in [1, 7]")

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "condition": self.condition.value,
            "tlx": self.tlx,
            "ai_items": self.ai_items,
            "free_text": self.free_text,
        }


@dataclass
class Session:
    session_id: str
    participant: str
    seed: int
    condition_order: tuple[StudyCondition, ...]
    case_lists: dict[StudyCondition, list[str]]
    created_at: float
    # Mutable progress, replayed from the event log.
    issued: dict[tuple[str, str], float] = field(default_factory=dict)
    decisions: dict[tuple[str, str], DecisionRecord] = field(default_factory=dict)
    surveys: dict[StudyCondition, SurveyResponse] = field(default_factory=dict)

    def condition_cases_answered(self, condition: StudyCondition) -> int:
        return sum(
            1 for cid in self.case_lists[condition] if (condition.value, cid) in self.decisions
        )

    def condition_complete(self, condition: StudyCondition) -> bool:
        return self.condition_cases_answered(condition) == len(self.case_lists[condition])

    def current_condition(self) -> StudyCondition | None:
        """First condition that is not yet fully answered and surveyed."""
        for condition in self.condition_order:
            if not self.condition_complete(condition) or condition not in self.surveys:
                return condition
        return None

    def status(self) -> str:
        return "complete" if self.current_condition() is None else "active"


class EventLog:
    """Append-only JSON-lines store, one file per session."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, session_id: str) -> Path:
        return self.root / f"{session_id}.jsonl"

    def append(self, session_id: str, event: dict) -> None:
        with open(self._path(session_id), "a") as fh:
            fh.write(json.dumps(event) + "\n")

    def events(self, session_id: str) -> list[dict]:
        path = self._path(session_id)
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text().splitlines() if line]

    def session_ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.jsonl"))


def _session_id(participant: str, seed: int) -> str:
    return hashlib.sha256(f"{participant}:{seed}".encode()).hexdigest()[:12]


class ReviewService:
    """Session orchestration over a scored study pool."""

    def __init__(
        self,
        pool: StudyPool,
        log: EventLog,
        clock=time.time,
        cases_per_category: int = CASES_PER_CATEGORY,
        share_cases_across_conditions: bool = False,
    ):
        self.pool = pool
        self.log = log
        self.clock = clock
        self.cases_per_category = cases_per_category
        self.share_cases = share_cases_across_conditions
        self._sessions: dict[str, Session] = {}
        for session_id in log.session_ids():
            self._replay(session_id)

    # -- session lifecycle ------------------------------------------------

    def create_session(self, participant: str, seed: int) -> Session:
        """Create (or return, idempotently) the session for (participant, seed)."""
        if not participant:
            raise InvalidInputError("participant pseudonym must be non-empty")
        session_id = _session_id(participant, seed)
        if session_id in self._sessions:
            return self._sessions[session_id]

        rng = np.random.default_rng([0xC0DE, seed])
        order = tuple(ALL_CONDITIONS[i] for i in rng.permutation(len(ALL_CONDITIONS)))
        case_lists = self._draw_case_lists(rng)
        session = Session(
            session_id=session_id,
            participant=participant,
            seed=seed,
            condition_order=order,
            case_lists=case_lists,
            created_at=self.clock(),
        )
        self._sessions[session_id] = session
        self.log.append(
            session_id,
            {
                "type": "session_created",
                "session_id": session_id,
                "participant": participant,
                "seed": seed,
                "condition_order": [c.value for c in order],
                "case_lists": {c.value: ids for c, ids in case_lists.items()},
                "ts": session.created_at,
            },
        )
        return session

    def _draw_case_lists(self, rng) -> dict[StudyCondition, list[str]]:
        categories = self.pool.categories()
        if self.share_cases:
            ids = balanced_subset(categories, self.cases_per_category, rng)
            lists = {}
            for condition in ALL_CONDITIONS:
                shuffled = list(ids)
                rng.shuffle(shuffled)
                lists[condition] = shuffled
            return lists
        # Disjoint lists: draw 4x per category in one pass, then deal them out.
        ids = balanced_subset(categories, self.cases_per_category * len(ALL_CONDITIONS), rng)
        per_category = self.cases_per_category * len(ALL_CONDITIONS)
        by_category = [
            ids[i * per_category : (i + 1) * per_category] for i in range(len(Category))
        ]
        lists = {}
        for idx, condition in enumerate(ALL_CONDITIONS):
            chosen = []
            for bucket in by_category:
                chosen.extend(
                    bucket[idx * self.cases_per_category : (idx + 1) * self.cases_per_category]
                )
            rng.shuffle(chosen)
            lists[condition] = chosen
        return lists

    def get_session(self, session_id: str) -> Session:
        session = self._sessions.get(session_id)
        if session is None:
            raise KeyError(f"unknown session {session_id!r}")
        return session

    # -- case flow ---------------------------------------------------------

    def next_case(self, session_id: str) -> dict:
        """The next pending case payload, or a condition/session-complete signal."""
        session = self.get_session(session_id)
        condition = session.current_condition()
        if condition is None:
            return {"status": "session_complete", "session_id": session_id}
        if session.condition_complete(condition):
            return {
                "status": "condition_complete",
                "session_id": session_id,
                "condition": condition.value,
                "survey_required": True,
            }

        case_id = next(
            cid
            for cid in session.case_lists[condition]
            if (condition.value, cid) not in session.decisions
        )
        case = self.pool.cases[case_id]
        issued_at = self.clock()
        key = (condition.value, case_id)
        if key not in session.issued:
            session.issued[key] = issued_at
            self.log.append(
                session_id,
                {
                    "type": "case_issued",
                    "condition": condition.value,
                    "case_id": case_id,
                    "ts": issued_at,
                },
            )
        payload = self._build_payload(session, condition, case)
        if condition is StudyCondition.AI_ONLY:
            # The model decides; record it immediately with no human input.
            self._record_decision(
                session,
                condition,
                case,
                human_decision=None,
                client_latency_ms=None,
                shown_payload=payload,
            )
        return payload

    def _build_payload(
        self, session: Session, condition: StudyCondition, case: StudyCase
    ) -> dict:
        index = session.condition_cases_answered(condition)
        payload = {
            "status": "case",
            "session_id": session.session_id,
            "condition": condition.value,
            "case_id": case.case_id,
            "case_index": index,
            "cases_total": len(session.case_lists[condition]),
            "xray_url": f"/v1/assets/{_asset_token(case.case_id)}/xray.png",
            "drr_url": f"/v1/assets/{_asset_token(case.case_id)}/drr.png",
            "human_input_enabled": condition is not StudyCondition.AI_ONLY,
        }
        if condition in (StudyCondition.AI_ONLY, StudyCondition.HUMAN_AI, StudyCondition.HUMAN_XAI):
            payload["ai_prediction"] = case.ai_prediction.value
            payload["ai_probability"] = case.ai_probability
        if condition is StudyCondition.HUMAN_XAI:
            payload["heatmap_url"] = f"/v1/assets/{_asset_token(case.case_id)}/heatmap.png"
            payload["prediction_set"] = {
                "labels": list(case.set_labels),
                "certain": case.set_certain,
                "fallback": case.set_fallback,
            }
        return payload

    def _ai_snapshot(self, payload: dict) -> dict:
        return {
            k: payload[k]
            for k in ("ai_prediction", "ai_probability", "heatmap_url", "prediction_set")
            if k in payload
        }

    def _record_decision(
        self,
        session: Session,
        condition: StudyCondition,
        case: StudyCase,
        human_decision: RegistrationLabel | None,
        client_latency_ms: float | None,
        shown_payload: dict,
    ) -> DecisionRecord:
        now = self.clock()
        issued_at = session.issued.get((condition.value, case.case_id), now)
        record = DecisionRecord(
            session_id=session.session_id,
            condition=condition,
            case_id=case.case_id,
            human_decision=human_decision,
            ai_payload=self._ai_snapshot(shown_payload),
            ground_truth=case.actual,
            category=case.category,
            latency_ms=(now - issued_at) * 1000.0,
            client_latency_ms=client_latency_ms,
            timestamp=now,
        )
        session.decisions[(condition.value, case.case_id)] = record
        self.log.append(session.session_id, {"type": "decision", **record.to_dict()})
        return record

    def submit_decision(
        self,
        session_id: str,
        case_id: str,
        decision: RegistrationLabel,
        client_latency_ms: float | None = None,
    ) -> DecisionRecord:
        session = self.get_session(session_id)
        condition = session.current_condition()
        if condition is None:
            raise ProtocolError("session already complete")
        if condition is StudyCondition.AI_ONLY:
            raise ProtocolError("human decisions are disabled in the AI_ONLY condition")
        key = (condition.value, case_id)
        if key in session.decisions:
            raise ProtocolError(f"case {case_id!r} already answered in {condition.value}")
        if key not in session.issued:
            raise ProtocolError(f"case {case_id!r} was never issued in {condition.value}")
        case = self.pool.cases[case_id]
        shown = self._build_payload(session, condition, case)
        return self._record_decision(
            session, condition, case, decision, client_latency_ms, shown
        )

    def submit_survey(self, session_id: str, response: SurveyResponse) -> None:
        session = self.get_session(session_id)
        condition = response.condition
        if condition not in session.case_lists:
            raise InvalidInputError(f"unknown condition {condition}")
        if not session.condition_complete(condition):
            raise ProtocolError(f"condition {condition.value} is not finished")
        if condition in session.surveys:
            raise ProtocolError(f"survey for {condition.value} already submitted")
        response.validate()
        session.surveys[condition] = response
        self.log.append(session_id, {"type": "survey", "ts": self.clock(), **response.to_dict()})

    # -- replay and export ---------------------------------------------------

    def _replay(self, session_id: str) -> None:
        session: Session | None = None
        for event in self.log.events(session_id):
            etype = event["type"]
            if etype == "session_created":
                session = Session(
                    session_id=event["session_id"],
                    participant=event["participant"],
                    seed=event["seed"],
                    condition_order=tuple(
                        StudyCondition(c) for c in event["condition_order"]
                    ),
                    case_lists={
                        StudyCondition(c): ids for c, ids in event["case_lists"].items()
                    },
                    created_at=event["ts"],
                )
            elif session is None:
                continue
            elif etype == "case_issued":
                session.issued[(event["condition"], event["case_id"])] = event["ts"]
            elif etype == "decision":
                record = DecisionRecord(
                    session_id=event["session_id"],
                    condition=StudyCondition(event["condition"]),
                    case_id=event["case_id"],
                    human_decision=(
                        RegistrationLabel(event["human_decision"])
                        if event["human_decision"]
                        else None
                    ),
                    ai_payload=event["ai_payload"],
                    ground_truth=RegistrationLabel(event["ground_truth"]),
                    category=Category(event["category"]),
                    latency_ms=event["latency_ms"],
                    client_latency_ms=event["client_latency_ms"],
                    timestamp=event["timestamp"],
                )
                session.decisions[(event["condition"], event["case_id"])] = record
            elif etype == "survey":
                response = SurveyResponse(
                    session_id=event["session_id"],
                    condition=StudyCondition(event["condition"]),
                    tlx=event["tlx"],
                    ai_items=event["ai_items"],
                    free_text=event.get("free_text", ""),
                )
                session.surveys[response.condition] = response
        if session is not None:
            self._sessions[session_id] = session

    def all_decisions(self) -> list[DecisionRecord]:
        records = []
        for sid in sorted(self._sessions):
            session = self._sessions[sid]
            for condition in session.condition_order:
                for cid in session.case_lists[condition]:
                    rec = session.decisions.get((condition.value, cid))
                    if rec is not None:
                        records.append(rec)
        return records

    def all_surveys(self) -> list[SurveyResponse]:
        out = []
        for sid in sorted(self._sessions):
            session = self._sessions[sid]
            for condition in session.condition_order:
                if condition in session.surveys:
                    out.append(session.surveys[condition])
        return out

    def export_results(self) -> dict:
        """Scored export: per-condition category accuracies, weighted accuracy,
        and the raw decision/survey tables."""
        decisions = self.all_decisions()
        conditions_summary = {}
        for condition in ALL_CONDITIONS:
            in_condition = [d for d in decisions if d.condition is condition]
            fractions: dict[str, float | None] = {}
            counts: dict[str, int] = {}
            for cat in Category:
                of_cat = [d for d in in_condition if d.category is cat]
                counts[cat.value] = len(of_cat)
                fractions[cat.value] = (
                    sum(d.correct for d in of_cat) / len(of_cat) if of_cat else None
                )
            conditions_summary[condition.value] = {
                "n_decisions": len(in_condition),
                "fraction_correct": fractions,
                "category_counts": counts,
                "weighted_accuracy": weighted_accuracy_observed(fractions),
            }
        return {
            "conditions": conditions_summary,
            "decisions": [d.to_dict() for d in decisions],
            "surveys": [s.to_dict() for s in self.all_surveys()],
        }


def _asset_token(case_id: str) -> str:
    return case_id.replace("/", "~")


def asset_case_id(token: str) -> str:
    return token.replace("~", "/")


# -- CSV export -------------------------------------------------------------

DECISION_COLUMNS = [
    "session_id",
    "condition",
    "case_id",
    "category",
    "human_decision",
    "ai_prediction",
    "ground_truth",
    "scored_decision",
    "correct",
    "latency_ms",
    "client_latency_ms",
    "timestamp",
]

SURVEY_COLUMNS = (
    ["session_id", "condition"]
    + [f"tlx_{s}" for s in TLX_SCALES]
    + [f"ai_{s}" for s in AI_EVAL_ITEMS]
    + ["free_text"]
)

CONDITION_COLUMNS = [
    "condition",
    "n_decisions",
    "frac_tp",
    "frac_tn",
    "frac_fp",
    "frac_fn",
    "weighted_accuracy",
]


def export_csv_tables(export: dict) -> dict[str, str]:
    """Render the export dict as three CSV tables with stable column order."""
    import csv as _csv
    import io

    def table(columns, rows):
        buf = io.StringIO()
        writer = _csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()

    decision_rows = []
    for d in export["decisions"]:
        human = d["human_decision"]
        ai_pred = d["ai_payload"].get("ai_prediction")
        scored = human if human is not None else ai_pred
        decision_rows.append(
            {
                "session_id": d["session_id"],
                "condition": d["condition"],
                "case_id": d["case_id"],
                "category": d["category"],
                "human_decision": human or "",
                "ai_prediction": ai_pred or "",
                "ground_truth": d["ground_truth"],
                "scored_decision": scored,
                "correct": int(scored == d["ground_truth"]),
                "latency_ms": f"{d['latency_ms']:.3f}",
                "client_latency_ms": (
                    f"{d['client_latency_ms']:.3f}" if d["client_latency_ms"] is not None else ""
                ),
                "timestamp": d["timestamp"],
            }
        )

    survey_rows = []
    for s in export["surveys"]:
        row = {"session_id": s["session_id"], "condition": s["condition"]}
        for scale in TLX_SCALES:
            row[f"tlx_{scale}"] = s["tlx"].get(scale, "")
        for item in AI_EVAL_ITEMS:
            row[f"ai_{item}"] = s["ai_items"].get(item, "")
        row["free_text"] = s["free_text"]
        survey_rows.append(row)

    condition_rows = []
    for condition in ALL_CONDITIONS:
        summary = export["conditions"][condition.value]
        fr = summary["fraction_correct"]

        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        condition_rows.append(
            {
                "condition": condition.value,
                "n_decisions": summary["n_decisions"],
                "frac_tp": fmt(fr["tp"]),
                "frac_tn": fmt(fr["tn"]),
                "frac_fp": fmt(fr["fp"]),
                "frac_fn": fmt(fr["fn"]),
                "weighted_accuracy": fmt(summary["weighted_accuracy"]),
            }
        )

    return {
        "decisions": table(DECISION_COLUMNS, decision_rows),
        "surveys": table(SURVEY_COLUMNS, survey_rows),
        "conditions": table(CONDITION_COLUMNS, condition_rows),
    }
