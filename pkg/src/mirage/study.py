"""Blinded pairwise human study: trial sampling, vote log, skill ratings.

Methods are compared through randomized two-image trials. Votes accumulate in
an append-only JSONL log (the source of truth; service state is a cache) and
are folded into Bayesian skill ratings with full draw support: each method
keeps a Gaussian skill belief (mu, sigma) that moment-matched updates shift
after every decisive outcome or tie. Win rates exclude ties from the
denominator. The HTTP service never reveals method identities to clients:
trial responses carry only opaque image tokens and the category label.
"""

import json
import math
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from statistics import NormalDist

from .errors import MirageError, ParseError, ValidationError

_NORMAL = NormalDist()
_SQRT2 = math.sqrt(2.0)


def _phi(x):
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _big_phi(x):
    # erfc keeps full relative precision deep into the lower tail, where the
    # erf-based stdlib cdf underflows to 0 and breaks the update ratios
    return 0.5 * math.erfc(-x / _SQRT2)


class UnknownTrialError(MirageError):
    """Vote referenced a trial id that was never issued (or expired)."""


class DuplicateVoteError(MirageError):
    """A second vote arrived for an already-voted trial."""


@dataclass(frozen=True)
class RatingParams:
    """Parameters of the two-player skill update."""

    mu0: float = 25.0
    sigma0: float = 25.0 / 3.0
    beta: float = 25.0 / 6.0
    tau: float = 25.0 / 300.0
    draw_probability: float = 0.10

    def draw_margin(self):
        # two players contribute performance variance beta^2 each
        return _NORMAL.inv_cdf((self.draw_probability + 1.0) / 2.0) * math.sqrt(2.0) * self.beta


DEFAULT_PARAMS = RatingParams()


@dataclass(frozen=True)
class Rating:
    method: str
    mu: float = DEFAULT_PARAMS.mu0
    sigma: float = DEFAULT_PARAMS.sigma0
    wins: int = 0
    losses: int = 0
    ties: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValidationError(f"sigma must be positive, got {self.sigma}")

    @property
    def appearances(self):
        return self.wins + self.losses + self.ties

    @property
    def win_rate(self):
        decisive = self.wins + self.losses
        return self.wins / decisive if decisive else None

    def to_dict(self):
        return {"method": self.method, "mu": self.mu, "sigma": self.sigma,
                "wins": self.wins, "losses": self.losses, "ties": self.ties,
                "win_rate": self.win_rate, "appearances": self.appearances}


def _v_win(t, eps):
    x = t - eps
    denom = _big_phi(x)
    return _phi(x) / denom if denom > 1e-300 else -x


def _w_win(t, eps):
    v = _v_win(t, eps)
    w = v * (v + t - eps)
    return min(max(w, 1e-12), 1.0 - 1e-12)


def _v_draw(t, eps):
    abs_t = abs(t)
    a = eps - abs_t
    b = -eps - abs_t
    denom = _big_phi(a) - _big_phi(b)
    numer = _phi(b) - _phi(a)
    v = (numer / denom) if denom > 1e-300 else a
    return -v if t < 0 else v


def _w_draw(t, eps):
    abs_t = abs(t)
    a = eps - abs_t
    b = -eps - abs_t
    denom = _big_phi(a) - _big_phi(b)
    if denom <= 1e-300:
        return 1.0 - 1e-12
    v = _v_draw(abs_t, eps)
    w = v * v + (a * _phi(a) - b * _phi(b)) / denom
    return min(max(w, 1e-12), 1.0 - 1e-12)


def rate_update(r_winner, r_loser, outcome, params=DEFAULT_PARAMS):
    """One two-player Bayesian skill update with draw support.

    outcome "win": the first rating won. outcome "tie": order is irrelevant.
    Skill uncertainty grows by the dynamics variance before the update; on a
    win the winner's mu strictly increases and the loser's strictly
    decreases, and both sigmas shrink.
    """
    if outcome not in ("win", "tie"):
        raise ValidationError(f"unknown outcome {outcome!r}")
    var_w = r_winner.sigma ** 2 + params.tau ** 2
    var_l = r_loser.sigma ** 2 + params.tau ** 2
    c = math.sqrt(var_w + var_l + 2.0 * params.beta ** 2)
    t = (r_winner.mu - r_loser.mu) / c
    eps = params.draw_margin() / c

    if outcome == "win":
        v = _v_win(t, eps)
        w = _w_win(t, eps)
        mu_w = r_winner.mu + (var_w / c) * v
        mu_l = r_loser.mu - (var_l / c) * v
        counts_w = {"wins": r_winner.wins + 1}
        counts_l = {"losses": r_loser.losses + 1}
    else:
        v = _v_draw(t, eps)
        w = _w_draw(t, eps)
        mu_w = r_winner.mu + (var_w / c) * v
        mu_l = r_loser.mu - (var_l / c) * v
        counts_w = {"ties": r_winner.ties + 1}
        counts_l = {"ties": r_loser.ties + 1}

    sigma_w = math.sqrt(var_w * (1.0 - (var_w / c ** 2) * w))
    sigma_l = math.sqrt(var_l * (1.0 - (var_l / c ** 2) * w))
    return (replace(r_winner, mu=mu_w, sigma=sigma_w, **counts_w),
            replace(r_loser, mu=mu_l, sigma=sigma_l, **counts_l))


def read_vote_log(path):
    """Parse a JSONL vote log; a corrupt line raises with its line number."""
    votes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                vote = json.loads(line)
                for key in ("method_left", "method_right", "choice"):
                    if key not in vote:
                        raise KeyError(key)
            except (json.JSONDecodeError, KeyError) as exc:
                raise ParseError(f"{path}:{lineno}: bad vote line: {exc}",
                                 raw_text=line) from exc
            votes.append(vote)
    return votes


def rank_methods(votes, params=DEFAULT_PARAMS):
    """Fold the vote log into ratings, ranked by mu descending.

    Votes are replayed in timestamp order (stable for equal stamps), so the
    ranking is a pure function of the log.
    """
    ratings = {}

    def get(method):
        if method not in ratings:
            ratings[method] = Rating(method=method, mu=params.mu0, sigma=params.sigma0)
        return ratings[method]

    ordered = sorted(votes, key=lambda v: v.get("timestamp", 0.0))
    for vote in ordered:
        left, right = vote["method_left"], vote["method_right"]
        choice = vote["choice"]
        if choice == "tie":
            a, b = rate_update(get(left), get(right), "tie", params)
            ratings[left], ratings[right] = a, b
        elif choice in ("left", "right"):
            winner, loser = (left, right) if choice == "left" else (right, left)
            w, l = rate_update(get(winner), get(loser), "win", params)
            ratings[winner], ratings[loser] = w, l
        else:
            raise ValidationError(f"unknown vote choice {choice!r}")
    return sorted(ratings.values(), key=lambda r: r.mu, reverse=True)


# ---------------------------------------------------------------------------
# Trial sampling


@dataclass(frozen=True)
class TrialPair:
    """One issued comparison; method identities stay server-side."""

    trial_id: str
    method_a: str
    method_b: str
    image_a: str
    image_b: str
    category: str
    a_is_left: bool

    def __post_init__(self):
        if self.method_a == self.method_b:
            raise ValidationError("a trial needs two distinct methods")

    @property
    def left_method(self):
        return self.method_a if self.a_is_left else self.method_b

    @property
    def right_method(self):
        return self.method_b if self.a_is_left else self.method_a

    @property
    def left_image(self):
        return self.image_a if self.a_is_left else self.image_b

    @property
    def right_image(self):
        return self.image_b if self.a_is_left else self.image_a


@dataclass(frozen=True)
class VoteRecord:
    trial_id: str
    choice: str
    participant_token: str
    timestamp: float

    def __post_init__(self):
        if self.choice not in ("left", "right", "tie"):
            raise ValidationError(f"unknown choice {self.choice!r}")


def sample_trial(pool, rng):
    """Draw one blinded trial from a per-method image index.

    pool: {method -> {category -> [image path, ...]}}. The unordered method
    pair is uniform among pairs sharing a category, the category uniform
    among those shared, the images uniform within, and left/right order is a
    fair coin.
    """
    methods = sorted(pool)
    eligible = []
    for i, m1 in enumerate(methods):
        for m2 in methods[i + 1:]:
            shared = sorted(set(pool[m1]) & set(pool[m2]))
            shared = [c for c in shared if pool[m1][c] and pool[m2][c]]
            if shared:
                eligible.append((m1, m2, shared))
    if not eligible:
        raise ValidationError("no method pair shares a category with images")
    m1, m2, shared = eligible[int(rng.integers(0, len(eligible)))]
    category = shared[int(rng.integers(0, len(shared)))]
    image_a = pool[m1][category][int(rng.integers(0, len(pool[m1][category])))]
    image_b = pool[m2][category][int(rng.integers(0, len(pool[m2][category])))]
    return TrialPair(
        trial_id=rng.bytes(16).hex(),
        method_a=m1, method_b=m2,
        image_a=str(image_a), image_b=str(image_b),
        category=category,
        a_is_left=bool(rng.integers(0, 2)))


# ---------------------------------------------------------------------------
# Service


class StudyState:
    """Issued trials, votes, image tokens; single-writer vote log."""

    def __init__(self, pool, votes_path, seed=0, params=DEFAULT_PARAMS,
                 clock=time.time):
        import numpy as np

        self.pool = pool
        self.votes_path = Path(votes_path)
        self.params = params
        self.clock = clock
        self.rng = np.random.default_rng(seed)
        self.trials = {}
        self.voted = set()
        self.tokens = {}
        self.lock = threading.Lock()
        if self.votes_path.exists():
            for vote in read_vote_log(self.votes_path):
                self.voted.add(vote.get("trial_id"))

    def issue_trial(self):
        with self.lock:
            trial = sample_trial(self.pool, self.rng)
            while trial.trial_id in self.trials:
                trial = sample_trial(self.pool, self.rng)
            self.trials[trial.trial_id] = trial
            left_token = self.rng.bytes(16).hex()
            right_token = self.rng.bytes(16).hex()
            self.tokens[left_token] = trial.left_image
            self.tokens[right_token] = trial.right_image
        return trial, left_token, right_token

    def record_vote(self, vote):
        """Append one vote to the durable log; duplicates are rejected."""
        with self.lock:
            trial = self.trials.get(vote.trial_id)
            if trial is None:
                raise UnknownTrialError(vote.trial_id)
            if vote.trial_id in self.voted:
                raise DuplicateVoteError(vote.trial_id)
            line = {
                "trial_id": vote.trial_id,
                "category": trial.category,
                "method_left": trial.left_method,
                "method_right": trial.right_method,
                "choice": vote.choice,
                "participant": vote.participant_token,
                "timestamp": vote.timestamp,
            }
            self.votes_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.votes_path, "a") as fh:
                fh.write(json.dumps(line) + "\n")
            self.voted.add(vote.trial_id)

    def ranking(self):
        if not self.votes_path.exists():
            return []
        return rank_methods(read_vote_log(self.votes_path), self.params)


def load_pools(path):
    """Read a pools file: {method -> {category -> [image path, ...]}}."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict) or not data:
        raise ValidationError(f"pools file {path} must map methods to categories")
    return data


def create_app(pool, votes_path, seed=0, params=DEFAULT_PARAMS, app_dir=None):
    """Build the study HTTP service (JSON API plus optional static UI)."""
    from fastapi import FastAPI, HTTPException, Request
    from fastapi.responses import FileResponse, RedirectResponse

    state = StudyState(pool, votes_path, seed=seed, params=params)
    app = FastAPI(title="pairwise study")
    app.state.study = state

    @app.get("/api/trial")
    def get_trial():
        try:
            trial, left_token, right_token = state.issue_trial()
        except ValidationError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"trial_id": trial.trial_id,
                "left_url": f"/img/{left_token}",
                "right_url": f"/img/{right_token}",
                "category": trial.category}

    @app.post("/api/vote")
    async def post_vote(request: Request):
        try:
            body = await request.json()
        except Exception:  # noqa: BLE001 - malformed client payload
            raise HTTPException(status_code=422, detail="body must be JSON")
        trial_id = body.get("trial_id")
        choice = body.get("choice")
        if not isinstance(trial_id, str) or choice not in ("left", "right", "tie"):
            raise HTTPException(status_code=422,
                                detail="need trial_id and choice in "
                                       "{left, right, tie}")
        vote = VoteRecord(trial_id=trial_id, choice=choice,
                          participant_token=str(body.get("participant", "anon")),
                          timestamp=state.clock())
        try:
            state.record_vote(vote)
        except UnknownTrialError:
            raise HTTPException(status_code=404, detail="unknown trial")
        except DuplicateVoteError:
            raise HTTPException(status_code=409, detail="trial already voted")
        return {"status": "ok"}

    @app.get("/api/ranking")
    def get_ranking():
        return [r.to_dict() for r in state.ranking()]

    @app.get("/img/{token}")
    def get_image(token: str):
        path = state.tokens.get(token)
        if path is None or not Path(path).exists():
            raise HTTPException(status_code=404, detail="unknown image token")
        return FileResponse(path)

    if app_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/app", StaticFiles(directory=str(app_dir), html=True), name="app")

        @app.get("/")
        def index():
            return RedirectResponse(url="/app/")

    return app


def serve_study(pool, votes_path, port=8000, host="127.0.0.1", seed=0,
                params=DEFAULT_PARAMS, app_dir=None):
    """Run the study service (blocking)."""
    import uvicorn

    app = create_app(pool, votes_path, seed=seed, params=params, app_dir=app_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
