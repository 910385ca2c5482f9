"""Domain types for the two-stage SMART: arms, responder categories,
stage-2 actions and the rules deciding which actions are feasible."""
import csv
import enum
from dataclasses import dataclass, field
from typing import Optional


class Arm(enum.IntEnum):
    ESC = 0
    ACT = 1
    DUL = 2
    EBEM = 3


ARMS = tuple(Arm)
N_ARMS = len(ARMS)


class ResponderCategory(enum.IntEnum):
    BEST_RESPONDER = 1
    RESPONDER_HIGH_PEG = 2
    INTERMEDIATE = 3
    NON_RESPONDER = 4


class ActionKind(enum.IntEnum):
    KEEP = 0
    AUGMENT = 1
    SWITCH = 2


@dataclass(frozen=True, order=True)
class Stage2Action:
    """Stage-2 decision relative to the stage-1 arm ``a1``.

    ``new_arm`` is None only for KEEP.
    """

    kind: ActionKind
    a1: Arm
    new_arm: Optional[Arm] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ActionKind(self.kind))
        object.__setattr__(self, "a1", Arm(self.a1))
        if self.kind is ActionKind.KEEP:
            if self.new_arm is not None:
                raise ValueError("KEEP takes no new arm")
        else:
            if self.new_arm is None:
                raise ValueError(f"{self.kind.name} needs a new arm")
            object.__setattr__(self, "new_arm", Arm(self.new_arm))
            if self.new_arm == self.a1:
                raise ValueError("new arm must differ from the stage-1 arm")

    @property
    def active_set(self) -> frozenset:
        if self.kind is ActionKind.KEEP:
            return frozenset({self.a1})
        if self.kind is ActionKind.AUGMENT:
            return frozenset({self.a1, self.new_arm})
        return frozenset({self.new_arm})

    def indicators(self):
        """0/1 tuple over arms, 1 where the arm is active in stage 2."""
        active = self.active_set
        return tuple(int(a in active) for a in ARMS)

    def __str__(self):
        if self.kind is ActionKind.KEEP:
            return f"Keep({self.a1.name})"
        return f"{self.kind.name.title()}({self.a1.name}->{self.new_arm.name})"

    @classmethod
    def keep(cls, a1):
        return cls(ActionKind.KEEP, a1)

    @classmethod
    def augment(cls, a1, new_arm):
        return cls(ActionKind.AUGMENT, a1, new_arm)

    @classmethod
    def switch(cls, a1, new_arm):
        # ESC skills persist, so an ESC starter can only add a treatment
        kind = ActionKind.AUGMENT if Arm(a1) is Arm.ESC else ActionKind.SWITCH
        return cls(kind, a1, new_arm)


def classify_responder(pgic: int, peg: float) -> ResponderCategory:
    """Map the 12-week PGIC (1-7) and PEG (0-10) to a responder category."""
    if isinstance(pgic, bool) or int(pgic) != pgic or not 1 <= pgic <= 7:
        raise ValueError(f"PGIC must be an integer in 1..7, got {pgic!r}")
    if not 0.0 <= peg <= 10.0:
        raise ValueError(f"PEG must lie in [0, 10], got {peg!r}")
    if pgic <= 2:
        return (ResponderCategory.BEST_RESPONDER if peg < 4.0
                else ResponderCategory.RESPONDER_HIGH_PEG)
    if pgic <= 4:
        return ResponderCategory.INTERMEDIATE
    return ResponderCategory.NON_RESPONDER


def _candidates(a1, excluded_arm):
    return [k for k in ARMS if k != a1 and k != excluded_arm]


def feasible_stage2(a1, responder, excluded_arm=None):
    """Stage-2 actions open to a participant, in a stable order.

    Order is Keep, then Augment by arm code, then Switch by arm code.  For
    ESC starters every Switch is relabelled as Augment, so duplicates are
    dropped.
    """
    a1 = Arm(a1)
    responder = ResponderCategory(responder)
    if excluded_arm is not None:
        excluded_arm = Arm(excluded_arm)
        if excluded_arm == a1:
            raise ValueError("stage-1 arm cannot be the excluded arm")
    others = _candidates(a1, excluded_arm)
    if responder is ResponderCategory.BEST_RESPONDER:
        actions = [Stage2Action.keep(a1)]
    elif responder is ResponderCategory.RESPONDER_HIGH_PEG:
        actions = [Stage2Action.augment(a1, k) for k in others]
    elif responder is ResponderCategory.INTERMEDIATE:
        actions = ([Stage2Action.augment(a1, k) for k in others]
                   + [Stage2Action.switch(a1, k) for k in others])
    else:
        actions = [Stage2Action.switch(a1, k) for k in others]
    actions = list(dict.fromkeys(actions))
    assert actions, "feasible stage-2 set is never empty with <= 1 exclusion"
    return actions


def all_stage2_actions(a1, excluded_arm=None):
    """Keep plus every Augment and Switch, ignoring responder status."""
    a1 = Arm(a1)
    others = _candidates(a1, excluded_arm)
    actions = ([Stage2Action.keep(a1)]
               + [Stage2Action.augment(a1, k) for k in others]
               + [Stage2Action.switch(a1, k) for k in others])
    return list(dict.fromkeys(actions))


@dataclass
class ParticipantRecord:
    id: int
    covariates: tuple
    a1: Arm
    y1: float
    responder: ResponderCategory
    a2: Stage2Action
    y2: Optional[float] = None
    excluded_arm: Optional[Arm] = None
    site: int = 0
    factors: tuple = field(default_factory=tuple)
    discontinued: bool = False

    def __post_init__(self):
        self.a1 = Arm(self.a1)
        self.responder = ResponderCategory(self.responder)
        if self.excluded_arm is not None:
            self.excluded_arm = Arm(self.excluded_arm)
            if self.excluded_arm == self.a1:
                raise ValueError(f"record {self.id}: assigned its excluded arm")
            if self.excluded_arm in self.a2.active_set:
                raise ValueError(f"record {self.id}: stage-2 uses its excluded arm")
        if self.a2.a1 != self.a1:
            raise ValueError(f"record {self.id}: stage-2 action built on another arm")
        if self.discontinued and self.responder is not ResponderCategory.NON_RESPONDER:
            raise ValueError(f"record {self.id}: early discontinuers route as non-responders")

    @property
    def completer(self):
        return self.y2 is not None


# ParticipantRecord CSV: arm codes 0..3, category codes 1..4, action kind 0..2,
# new_a2 = -1 for Keep, excluded = -1 when absent, y2 empty when missing.
SCHEMA_VERSION = 1
BASE_COLUMNS = ["id", "site", "excluded", "a1", "y1", "responder", "a2_kind", "a2_new",
                "y2", "discontinued"]


def _fmt(x):
    return repr(float(x))


def write_records(path, records):
    records = list(records)
    n_cov = len(records[0].covariates) if records else 0
    n_fac = len(records[0].factors) if records else 0
    for r in records:
        if len(r.covariates) != n_cov or len(r.factors) != n_fac:
            raise ValueError(f"record {r.id}: covariate/factor width differs from the first record")
    header = (BASE_COLUMNS + [f"z{i + 1}" for i in range(n_cov)]
              + [f"f{i + 1}" for i in range(n_fac)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in records:
            w.writerow(
                [r.id, r.site, -1 if r.excluded_arm is None else int(r.excluded_arm),
                 int(r.a1), _fmt(r.y1), int(r.responder), int(r.a2.kind),
                 -1 if r.a2.new_arm is None else int(r.a2.new_arm),
                 "" if r.y2 is None else _fmt(r.y2), int(r.discontinued)]
                + [_fmt(z) for z in r.covariates] + [int(f) for f in r.factors])


def read_records(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:len(BASE_COLUMNS)] != BASE_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header[:len(BASE_COLUMNS)]}")
        z_idx = [i for i, h in enumerate(header) if h.startswith("z")]
        f_idx = [i for i, h in enumerate(header) if h.startswith("f")]
        out = []
        for row in reader:
            a1 = Arm(int(row[3]))
            new = int(row[7])
            a2 = Stage2Action(ActionKind(int(row[6])), a1, None if new < 0 else Arm(new))
            exc = int(row[2])
            out.append(ParticipantRecord(
                id=int(row[0]), site=int(row[1]),
                excluded_arm=None if exc < 0 else Arm(exc),
                a1=a1, y1=float(row[4]), responder=ResponderCategory(int(row[5])), a2=a2,
                y2=None if row[8] == "" else float(row[8]), discontinued=bool(int(row[9])),
                covariates=tuple(float(row[i]) for i in z_idx),
                factors=tuple(int(row[i]) for i in f_idx)))
    return out
