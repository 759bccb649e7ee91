"""Synthetic reasoning tasks, answer parsing and rule-based rewards.

Three task kinds are supported:

* ``countdown-mini`` -- combine the source numbers with + - * / (each used
  exactly once) to hit the target; the answer is an expression.
* ``arith-chain`` -- evaluate ``a op b op c ...`` strictly left to right.
* ``sudoku4`` -- complete a 4x4 grid with 2x2 boxes.

Responses look like ``STEP: 3 + 7 = 10 STEP: 10 * 2 = 20 ANS: ( 3 + 7 ) * 2``
followed by EOS padding.
"""
from __future__ import annotations

import ast
import itertools
import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .errors import ContractError
from .vocab import VOCAB, Vocabulary

KINDS = ("countdown-mini", "arith-chain", "sudoku4")
PROMPT_LEN = {"countdown-mini": 16, "arith-chain": 16, "sudoku4": 20}
ACCURACY_WEIGHT = 1.0
FORMAT_WEIGHT = 0.2


@dataclass
class TaskInstance:
    kind: str
    prompt_text: str
    target: object
    metadata: dict = field(default_factory=dict)
    seed: int | None = None
    prompt_len: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown task kind {self.kind!r}")
        if not self.prompt_len:
            self.prompt_len = PROMPT_LEN[self.kind]

    @property
    def prompt(self) -> np.ndarray:
        ids = VOCAB.encode(self.prompt_text)
        if len(ids) > self.prompt_len:
            raise ContractError(f"prompt needs {len(ids)} tokens, width is {self.prompt_len}")
        return np.array([VOCAB.pad_id] * (self.prompt_len - len(ids)) + ids, dtype=np.int64)

    def to_record(self) -> dict:
        return {"kind": self.kind, "prompt_text": self.prompt_text, "target": self.target,
                "metadata": self.metadata, "seed": self.seed}

    @classmethod
    def from_record(cls, rec: dict) -> "TaskInstance":
        target = rec["target"]
        if isinstance(target, list):
            target = tuple(target)
        return cls(rec["kind"], rec["prompt_text"], target, rec.get("metadata", {}), rec.get("seed"))


@dataclass
class OutcomeReward:
    accuracy: int
    format: float
    total: float


@dataclass
class AlignmentReport:
    steps_parsed: int
    steps_valid: int
    chain_reaches_answer: bool

    @property
    def aligned(self) -> bool:
        """Every step valid, at least one step, and the chain produces the answer."""
        return self.steps_parsed > 0 and self.steps_valid == self.steps_parsed and self.chain_reaches_answer


# --- countdown -----------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _apply(op, a, b):
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0:
        return None
    return Fraction(a) / b


def _join(op, left, right):
    lt, lp = left
    rt, rp = right
    if lp < _PREC[op]:
        lt = f"( {lt} )"
    if rp < _PREC[op] or (rp == _PREC[op] and op in "-/"):
        rt = f"( {rt} )"
    return f"{lt} {op} {rt}", _PREC[op]


@lru_cache(maxsize=4096)
def countdown_solutions(numbers: tuple) -> dict:
    """All integer targets reachable with non-negative integer intermediates.

    Maps value -> (steps, expression) with the shortest rendering for that value.
    Each step is a string ``"a op b = c"``.
    """
    best: dict = {}

    def rec(items):
        if len(items) == 1:
            value, expr, steps = items[0]
            text = expr[0]
            cost = len(VOCAB.encode(text)) + sum(len(VOCAB.encode(s)) for s in steps)
            if value not in best or cost < best[value][0]:
                best[value] = (cost, tuple(steps), text)
            return
        for i, j in itertools.permutations(range(len(items)), 2):
            (a, ea, sa), (b, eb, sb) = items[i], items[j]
            rest = [items[k] for k in range(len(items)) if k not in (i, j)]
            for op in "+-*/":
                v = _apply(op, a, b)
                if v is None or v < 0 or v != int(v):
                    continue
                v = int(v)
                rest_new = rest + [(v, _join(op, ea, eb), sa + sb + [f"{a} {op} {b} = {v}"])]
                rec(rest_new)

    rec([(n, (str(n), 3), []) for n in numbers])
    return {v: (steps, text) for v, (_, steps, text) in best.items()}


def countdown_reachable(numbers, target) -> bool:
    """Exhaustive check over every expression tree with rational intermediates."""
    target = Fraction(target)

    def values(nums):
        if len(nums) == 1:
            return {Fraction(nums[0])}
        out = set()
        for r in range(1, len(nums)):
            for left_idx in itertools.combinations(range(len(nums)), r):
                left = tuple(nums[i] for i in left_idx)
                right = tuple(nums[i] for i in range(len(nums)) if i not in left_idx)
                for a in values(left):
                    for b in values(right):
                        out.update({a + b, a - b, a * b})
                        if b != 0:
                            out.add(a / b)
        return out

    return target in values(tuple(numbers))


def gen_countdown_mini(rng, n_numbers=3, value_max=20, target_max=100, max_response_len=31) -> TaskInstance:
    if n_numbers not in (2, 3, 4):
        raise ContractError("n_numbers must be 2, 3 or 4")
    while True:
        numbers = tuple(int(v) for v in rng.integers(1, value_max + 1, size=n_numbers))
        sols = countdown_solutions(numbers)
        cands = sorted(v for v, (steps, expr) in sols.items()
                       if 1 <= v <= target_max and len(response_text(steps, expr).split()) <= max_response_len
                       and len(VOCAB.encode(response_text(steps, expr))) <= max_response_len)
        if not cands:
            continue
        target = int(cands[int(rng.integers(len(cands)))])
        if not countdown_reachable(numbers, target):
            continue
        steps, expr = sols[target]
        text = " , ".join(str(n) for n in numbers) + f" TGT {target} ?"
        return TaskInstance("countdown-mini", text, target,
                            {"numbers": list(numbers), "steps": list(steps), "expression": expr})


# --- arithmetic chain ------------------------------------------------------------

def eval_left_to_right(operands, ops) -> int:
    acc = operands[0]
    for op, b in zip(ops, operands[1:]):
        acc = _apply(op, acc, b)
    return int(acc)


def gen_arith_chain(rng, ops=2, value_max=9) -> TaskInstance:
    if ops < 1:
        raise ContractError("ops must be >= 1")
    while True:
        operands = [int(v) for v in rng.integers(1, value_max + 1, size=ops + 1)]
        opl = [str(o) for o in rng.choice(["+", "-", "*"], size=ops)]
        acc, steps, ok = operands[0], [], True
        for op, b in zip(opl, operands[1:]):
            nxt = int(_apply(op, acc, b))
            if nxt < 0:
                ok = False
                break
            steps.append(f"{acc} {op} {b} = {nxt}")
            acc = nxt
        if not ok:
            continue
        text = " ".join(itertools.chain.from_iterable(zip(map(str, operands), opl + ["?"])))
        return TaskInstance("arith-chain", text, acc, {"operands": operands, "ops": opl, "steps": steps})


# --- sudoku ------------------------------------------------------------------------

_UNITS = ([[r * 4 + c for c in range(4)] for r in range(4)]
          + [[r * 4 + c for r in range(4)] for c in range(4)]
          + [[(br + r) * 4 + bc + c for r in range(2) for c in range(2)] for br in (0, 2) for bc in (0, 2)])
_PEERS = [sorted({p for u in _UNITS if i in u for p in u} - {i}) for i in range(16)]


def sudoku_valid(grid) -> bool:
    grid = list(grid)
    return len(grid) == 16 and all(sorted(grid[i] for i in u) == [1, 2, 3, 4] for u in _UNITS)


def sudoku_solve(givens, limit=2) -> list:
    """Backtracking solver; returns up to ``limit`` solutions (0 marks a blank)."""
    grid = list(givens)
    sols = []

    def rec():
        if len(sols) >= limit:
            return
        try:
            i = grid.index(0)
        except ValueError:
            sols.append(tuple(grid))
            return
        used = {grid[p] for p in _PEERS[i]}
        for v in range(1, 5):
            if v not in used:
                grid[i] = v
                rec()
                grid[i] = 0

    for i, v in enumerate(grid):
        if v and v in {grid[p] for p in _PEERS[i]}:
            return []
    rec()
    return sols


@lru_cache(maxsize=1)
def all_sudoku4_grids() -> tuple:
    return tuple(sudoku_solve([0] * 16, limit=10_000))


def gen_sudoku4(rng, givens=8) -> TaskInstance:
    if not 4 <= givens <= 15:
        raise ContractError("givens must lie in 4..15")
    grids = all_sudoku4_grids()
    while True:
        sol = grids[int(rng.integers(len(grids)))]
        puzzle = list(sol)
        for cell in rng.permutation(16):
            if sum(v > 0 for v in puzzle) == givens:
                break
            keep = puzzle[cell]
            puzzle[cell] = 0
            if len(sudoku_solve(puzzle)) != 1:
                puzzle[cell] = keep
        if sum(v > 0 for v in puzzle) == givens and len(sudoku_solve(puzzle)) == 1:
            break
    rows = [" ".join(str(v) if v else "." for v in puzzle[r * 4:(r + 1) * 4]) for r in range(4)]
    return TaskInstance("sudoku4", " | ".join(rows) + " ?", tuple(sol), {"givens": puzzle})


def generate_task(kind: str, rng, **kw) -> TaskInstance:
    if kind == "countdown-mini":
        return gen_countdown_mini(rng, **kw)
    if kind == "arith-chain":
        return gen_arith_chain(rng, **kw)
    if kind == "sudoku4":
        return gen_sudoku4(rng, **kw)
    raise ContractError(f"unknown task kind {kind!r}")


# --- canonical responses -------------------------------------------------------------

def response_text(steps, answer: str) -> str:
    return " ".join([f"STEP: {s}" for s in steps] + [f"ANS: {answer}"])


def reference_response(task: TaskInstance) -> str:
    """A correct, fully aligned response for ``task``."""
    if task.kind == "countdown-mini":
        return response_text(task.metadata["steps"], task.metadata["expression"])
    if task.kind == "arith-chain":
        return response_text(task.metadata["steps"], str(task.target))
    blanks = [str(v) for v, g in zip(task.target, task.metadata["givens"]) if not g]
    rows = [" ".join(str(v) for v in task.target[r * 4:(r + 1) * 4]) for r in range(4)]
    return f"STEP: {' '.join(blanks)} ANS: {' | '.join(rows)}"


def encode_response(text: str, gen_len: int, vocab: Vocabulary = VOCAB) -> np.ndarray:
    ids = vocab.encode(text)
    if len(ids) > gen_len:
        raise ContractError(f"response needs {len(ids)} tokens, gen_len is {gen_len}")
    return np.array(ids + [vocab.eos_id] * (gen_len - len(ids)), dtype=np.int64)


# --- parsing and rewards ---------------------------------------------------------------

@dataclass(frozen=True)
class ParsedExpr:
    text: str
    value: Fraction | None
    leaves: tuple


def _blocks(response, vocab: Vocabulary):
    """Split a response into (delimiter, tokens) blocks; text after EOS is ignored."""
    ids = [int(i) for i in np.asarray(response).ravel()]
    if vocab.eos_id in ids:
        ids = ids[:ids.index(vocab.eos_id)]
    blocks, cur = [], None
    for i in ids:
        if i in (vocab.step_id, vocab.ans_id):
            cur = (i, [])
            blocks.append(cur)
        elif cur is not None:
            cur[1].append(i)
    return blocks


def _eval_expr(text: str) -> ParsedExpr | None:
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError:
        return None
    leaves = []

    def ev(node):
        if isinstance(node, ast.Constant) and type(node.value) is int:
            leaves.append(node.value)
            return Fraction(node.value)
        if isinstance(node, ast.BinOp) and type(node.op) in (ast.Add, ast.Sub, ast.Mult, ast.Div):
            a, b = ev(node.left), ev(node.right)
            if a is None or b is None:
                return None
            op = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/"}[type(node.op)]
            return _apply(op, a, b)
        raise ValueError("unsupported syntax")

    try:
        value = ev(tree.body)
    except ValueError:
        return None
    return ParsedExpr(text, value, tuple(leaves))


def parse_answer(response, task: TaskInstance, vocab: Vocabulary = VOCAB):
    """Decoded answer after the last ``ANS:``, or None when malformed."""
    answers = [toks for d, toks in _blocks(response, vocab) if d == vocab.ans_id]
    if not answers or not answers[-1]:
        return None
    span = answers[-1]
    if any(t in (vocab.mask_id, vocab.pad_id) for t in span):
        return None
    if task.kind == "countdown-mini":
        return _eval_expr(vocab.decode(span))
    if task.kind == "arith-chain":
        text = vocab.decode(span).replace(" ", "")
        if text.lstrip("-").isdigit() and not (len(text.lstrip("-")) > 1 and text.lstrip("-")[0] == "0"):
            return int(text)
        return None
    bar = vocab.index["|"]
    cells = [t for t in span if t != bar]
    if len(cells) != 16 or not all(vocab.is_digit(t) for t in cells):
        return None
    return tuple(int(vocab.tokens[t]) for t in cells)


def outcome_indicator(response, task: TaskInstance, vocab: Vocabulary = VOCAB) -> int:
    ans = parse_answer(response, task, vocab)
    if ans is None:
        return 0
    if task.kind == "countdown-mini":
        return int(ans.value is not None and ans.value == task.target
                   and Counter(ans.leaves) == Counter(task.metadata["numbers"]))
    if task.kind == "arith-chain":
        return int(ans == task.target)
    givens = task.metadata["givens"]
    return int(sudoku_valid(ans) and all(g == 0 or g == a for g, a in zip(givens, ans)))


def format_reward(response, vocab: Vocabulary = VOCAB) -> float:
    blocks = _blocks(response, vocab)
    score = 0.0
    if any(d == vocab.step_id for d, _ in blocks):
        score += 0.5
    if blocks and blocks[-1][0] == vocab.ans_id and blocks[-1][1]:
        score += 0.5
    return score


def outcome_reward(response, task: TaskInstance, accuracy_weight=ACCURACY_WEIGHT,
                   format_weight=FORMAT_WEIGHT, vocab: Vocabulary = VOCAB) -> OutcomeReward:
    if accuracy_weight < 0 or format_weight < 0:
        raise ContractError("reward weights must be non-negative")
    acc = outcome_indicator(response, task, vocab)
    fmt = format_reward(response, vocab)
    return OutcomeReward(acc, fmt, accuracy_weight * acc + format_weight * fmt)


def _parse_step(toks, vocab: Vocabulary):
    words = vocab.decode(toks).split()
    if len(words) != 5 or words[1] not in "+-*/" or words[3] != "=":
        return None
    a, op, b, _, c = words
    if not (a.isdigit() and b.isdigit() and c.isdigit()):
        return None
    return int(a), op, int(b), int(c)


def alignment_check(response, task: TaskInstance, vocab: Vocabulary = VOCAB) -> AlignmentReport:
    """Rule-based check that the STEP chain derives the final answer.

    A step ``a op b = c`` is valid when the arithmetic holds and ``a`` and
    ``b`` are still available: each source number and each output of a prior
    valid step can be consumed once.
    """
    if task.kind == "countdown-mini":
        pool = Counter(task.metadata["numbers"])
    elif task.kind == "arith-chain":
        pool = Counter(task.metadata["operands"])
    else:
        raise ContractError("alignment check supports countdown-mini and arith-chain only")
    parsed = valid = 0
    outputs = []
    for delim, toks in _blocks(response, vocab):
        if delim != vocab.step_id:
            continue
        parsed += 1
        step = _parse_step(toks, vocab)
        if step is None:
            continue
        a, op, b, c = step
        if _apply(op, a, b) != c:
            continue
        need = Counter([a, b])
        if any(pool[k] < n for k, n in need.items()):
            continue
        pool -= need
        pool[c] += 1
        valid += 1
        outputs.append(c)
    ans = parse_answer(response, task, vocab)
    if task.kind == "countdown-mini":
        ans = ans.value if ans is not None else None
    reaches = ans is not None and any(o == ans for o in outputs)
    return AlignmentReport(parsed, valid, bool(reaches))


# --- dataset files ----------------------------------------------------------------------

def make_dataset(kind: str, count: int, seed: int, test_count: int = 0, **kw):
    """Instances with per-instance seeds ``seed * 10**6 + i``; the last ``test_count`` form the test split."""
    if count < 1:
        raise ContractError("count must be >= 1")
    base = int(seed) * 10**6
    out = []
    for i in range(count):
        rng = np.random.default_rng(base + i)
        inst = generate_task(kind, rng, **kw)
        inst.seed = base + i
        out.append(inst)
    n_train = count - test_count
    header = {"format": "sapo-dataset-v1", "kind": kind, "count": count, "seed": int(seed),
              "prompt_len": PROMPT_LEN[kind], "params": kw,
              "splits": {"train": [base, base + n_train], "test": [base + n_train, base + count]}}
    return header, out


def _split_of(seed: int, header: dict) -> str:
    for name, (lo, hi) in header["splits"].items():
        if lo <= seed < hi:
            return name
    return "train"


def write_dataset(path, header: dict, instances) -> None:
    """One self-describing record per line: format tag, split name, then the instance fields."""
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            rec = {"format": header["format"], "split": _split_of(inst.seed, header), **inst.to_record()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_dataset(path, split: str | None = None):
    """Returns (summary, instances); ``split`` keeps only records tagged with that split."""
    with open(path, encoding="utf-8") as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    if split is not None:
        recs = [r for r in recs if r.get("split", "train") == split]
    insts = [TaskInstance.from_record(r) for r in recs]
    header = {"format": recs[0]["format"] if recs else None, "count": len(insts),
              "kinds": sorted({t.kind for t in insts})}
    return header, insts
