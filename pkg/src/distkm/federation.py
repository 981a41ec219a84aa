"""Sequential site-to-site protocol.

Sites are sandboxed objects that only exchange serialized bytes, so the
privacy contract (no individual-level fields on the wire) is enforced
structurally, not by convention. One pass for unweighted curves; two
passes for IPW: propensity fitting, then weighted curve updates with
inference accumulators.
"""

import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from . import encoding
from .errors import (
    InitializationError,
    ProtocolError,
    TailSupportError,
    ValidationError,
)
from .influence import (
    DEFAULT_BATCH_SIZE,
    UpdateBatch,
    UpdateDiagnostics,
    update_batch,
    update_weighted_batch,
)
from .inference import (
    GROUPS,
    InferenceAccumulators,
    StudyResult,
    accumulate_weighted_ci_batch,
    accumulate_weighted_logrank,
    ci_loglog,
    logrank_distributed,
    weighted_ci,
    weighted_logrank,
)
from .quadrature import IntegrationPolicy
from .renewable_glm import PropensityState, propensity_init, propensity_update, weights_for
from .spline_curve import (
    ATRISK_FLOOR,
    CurveView,
    SplineParams,
    clamp_probability,
    default_grid,
    fit_params,
    insert_knots,
    knots_from_quantiles,
    plan_knot_additions,
    support_limit,
)
from .surv_core import km_fit, km_fit_weighted, validate_records

PROTOCOL_VERSION = 1

PASS_PROPENSITY = "propensity"
PASS_CURVES = "curves"

_TOP_LEVEL_KEYS = {
    "protocol_version",
    "pass_id",
    "group_params",
    "accumulators",
    "propensity",
    "site_trace",
}


@dataclass(frozen=True)
class SiteDataset:
    """One site's identifier and local records; may hold a single record."""

    site_id: str
    records: tuple

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.site_id:
            raise ValidationError("site_id must be nonempty")
        validate_records(self.records)


@dataclass(frozen=True)
class FederationConfig:
    """Public study design shared by every site."""

    mode: str = "unweighted"
    eval_times: tuple = ()
    initial_knots: int = 9
    knot_cap: int = 12
    knot_growth_start: int = 1000
    knot_growth_every: int = 150
    degree: int = 3
    link: str = "logit"
    batch_size: int | None = DEFAULT_BATCH_SIZE
    batch_fraction: float | None = None
    restriction: float = 0.0
    confint_restriction: float = 0.0
    abs_tol: float = 1e-8
    romberg_levels: int = 10
    t_max: float | None = None
    min_site1_records: int = 50
    min_site1_events: int = 10

    def __post_init__(self):
        if self.mode not in ("unweighted", "ipw"):
            raise ValidationError(f"mode must be 'unweighted' or 'ipw', got {self.mode!r}")
        if len(self.eval_times) == 0:
            raise ValidationError("eval_times must be prespecified")
        et = np.asarray(self.eval_times, dtype=np.float64)
        if np.any(np.diff(et) <= 0) or np.any(et < 0):
            raise ValidationError("eval_times must be nonnegative and strictly increasing")
        object.__setattr__(self, "eval_times", tuple(float(t) for t in et))
        if (self.batch_size is None) == (self.batch_fraction is None):
            raise ValidationError("exactly one of batch_size / batch_fraction must be set")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.batch_fraction is not None and not (0 < self.batch_fraction < 1):
            raise ValidationError(f"batch_fraction must be in (0, 1), got {self.batch_fraction}")
        if self.initial_knots < 1 or self.knot_cap < self.initial_knots:
            raise ValidationError("knot counts must satisfy 1 <= initial_knots <= knot_cap")

    def update_policy(self):
        return IntegrationPolicy(
            restriction=self.restriction,
            romberg_levels=self.romberg_levels,
            abs_tol=self.abs_tol,
        )

    def ci_policy(self):
        return IntegrationPolicy(
            restriction=self.confint_restriction,
            romberg_levels=self.romberg_levels,
            abs_tol=self.abs_tol,
        )

    def batch_for(self, n_cum):
        if self.batch_size is not None:
            return self.batch_size
        return max(1, round(self.batch_fraction * n_cum))

    def target_knots(self, n_cum):
        if self.knot_growth_every <= 0:
            return self.initial_knots
        extra = max(0, n_cum - self.knot_growth_start) // self.knot_growth_every
        return int(min(self.knot_cap, self.initial_knots + extra))


@dataclass
class SiteMessage:
    """Everything that crosses a site boundary; never individual-level."""

    pass_id: str
    accumulators: InferenceAccumulators
    group_params: dict | None = None
    propensity: PropensityState | None = None
    site_trace: list = field(default_factory=list)
    protocol_version: int = PROTOCOL_VERSION


def _timestamp():
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def serialize_message(msg):
    """Lossless fixed-width JSON encoding of a SiteMessage, as bytes."""
    d = {
        "protocol_version": msg.protocol_version,
        "pass_id": msg.pass_id,
        "group_params": None
        if msg.group_params is None
        else {g: p.to_dict() for g, p in sorted(msg.group_params.items())},
        "accumulators": msg.accumulators.to_dict(),
        "propensity": None if msg.propensity is None else msg.propensity.to_dict(),
        "site_trace": [
            {"site_id": sid, "n": encoding.fmt_int(n), "timestamp": ts}
            for sid, n, ts in msg.site_trace
        ],
    }
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")


def deserialize_message(data):
    """Parse and validate a message; rejects tampered or off-schema input."""
    try:
        d = json.loads(data.decode("utf-8") if isinstance(data, bytes) else data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"message is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ProtocolError("message must be a JSON object")
    unknown = set(d) - _TOP_LEVEL_KEYS
    if unknown:
        raise ProtocolError(f"unknown message fields: {sorted(unknown)}", field_path=sorted(unknown)[0])
    if d.get("protocol_version") != PROTOCOL_VERSION:
        raise ProtocolError(
            f"protocol_version: expected {PROTOCOL_VERSION}, got {d.get('protocol_version')!r}",
            field_path="protocol_version",
        )
    pass_id = d.get("pass_id")
    if pass_id not in (PASS_PROPENSITY, PASS_CURVES):
        raise ProtocolError(f"pass_id: unknown pass {pass_id!r}", field_path="pass_id")

    group_params = None
    if d.get("group_params") is not None:
        if not isinstance(d["group_params"], dict):
            raise ProtocolError("group_params: expected a mapping", field_path="group_params")
        group_params = {
            g: SplineParams.from_dict(p, path=f"group_params.{g}")
            for g, p in d["group_params"].items()
        }

    acc = InferenceAccumulators.from_dict(d.get("accumulators") or {}, path="accumulators")

    propensity = None
    if d.get("propensity") is not None:
        propensity = PropensityState.from_dict(d["propensity"], path="propensity")

    trace = []
    for i, entry in enumerate(d.get("site_trace") or []):
        path = f"site_trace[{i}]"
        if not isinstance(entry, dict) or set(entry) != {"site_id", "n", "timestamp"}:
            raise ProtocolError(f"{path}: malformed trace entry", field_path=path)
        trace.append(
            (entry["site_id"], encoding.parse_int(entry["n"], f"{path}.n"), entry["timestamp"])
        )

    return SiteMessage(
        pass_id=pass_id,
        accumulators=acc,
        group_params=group_params,
        propensity=propensity,
        site_trace=trace,
        protocol_version=PROTOCOL_VERSION,
    )


def field_inventory(obj, prefix=""):
    """Sorted, index-free key paths of a JSON structure.

    Two messages with the same inventory share the exact field schema,
    whatever the sizes of the sites behind them.
    """

    def walk(node, at):
        if isinstance(node, dict):
            out = set()
            for k, v in node.items():
                out |= walk(v, f"{at}.{k}" if at else k)
            return out
        if isinstance(node, list):
            return walk(node[0], f"{at}[]") if node else {f"{at}[]"}
        return {at}

    return sorted(walk(obj, prefix))


def _cap_records(records, t_max):
    """Administrative censoring at the study horizon.

    Risk sets and event counts on [0, t_max] are unchanged by this, so
    every estimand restricted to the horizon is exactly preserved.
    """
    out = []
    for r in records:
        if r.time > t_max:
            out.append(replace(r, time=t_max, event=0))
        else:
            out.append(r)
    return tuple(out)


def _group_names(records):
    if all(r.arm is None for r in records):
        return ("overall",)
    if any(r.arm is None for r in records):
        raise ValidationError("arm must be present for all records or none")
    return GROUPS


def _group_indices(records, group):
    if group == "overall":
        return list(range(len(records)))
    want = 0 if group == "arm0" else 1
    return [i for i, r in enumerate(records) if r.arm == want]


def _empirical_at_risk(times, weights, grid):
    # closed comparison: matches the KM risk-set convention (X >= t_j) and
    # keeps the administrative-censoring atom at t_max in the risk set
    num = (weights[:, None] * (times[:, None] >= grid[None, :])).sum(axis=0)
    return num / weights.sum()


def _adaptive_floor(n_cum):
    """At-risk floor that tracks what n observations can support.

    A fitted at-risk value below 0.5/n corresponds to less than half a
    subject at risk; exact KM has no event times out there, so events in
    that region carry spline artifacts rather than information.
    """
    return max(ATRISK_FLOOR, 0.5 / max(1, n_cum))


def _screen_tail_events(records, params, diagnostics, floor):
    """Downgrade events beyond the estimable support to censored-at-support."""
    view = CurveView(params)
    cap = support_limit(params, floor=floor)
    out = []
    for r in records:
        if r.event == 1 and view.at_risk(min(r.time, params.t_max)) < floor:
            out.append(replace(r, time=min(r.time, cap), event=0))
            if diagnostics is not None:
                diagnostics.tail_events_downgraded += 1
        else:
            out.append(r)
    return out


class Site:
    """Sandboxed holder of one site's records; talks in serialized bytes only."""

    def __init__(self, dataset):
        self.dataset = dataset

    @property
    def site_id(self):
        return self.dataset.site_id

    # -- pass 1: propensity -------------------------------------------------

    def propensity_initialize(self, config):
        state = propensity_init(list(self.dataset.records))
        acc = InferenceAccumulators.empty(config.eval_times)
        acc.count_arms(self.dataset.records)
        msg = SiteMessage(pass_id=PASS_PROPENSITY, accumulators=acc, propensity=state)
        msg.site_trace.append((self.site_id, len(self.dataset.records), _timestamp()))
        return serialize_message(msg)

    def propensity_advance(self, msg_bytes, config):
        msg = deserialize_message(msg_bytes)
        if msg.pass_id != PASS_PROPENSITY:
            raise ProtocolError(f"pass_id: expected {PASS_PROPENSITY}", field_path="pass_id")
        if msg.propensity is None:
            raise ProtocolError("propensity: missing state in pass 1", field_path="propensity")
        msg.propensity = propensity_update(msg.propensity, list(self.dataset.records))
        msg.accumulators.count_arms(self.dataset.records)
        msg.site_trace.append((self.site_id, len(self.dataset.records), _timestamp()))
        return serialize_message(msg)

    # -- pass 2 (or the single unweighted pass): curves ---------------------

    def initialize_curves(self, config, broadcast=None, diagnostics=None):
        records = list(self.dataset.records)
        t_max = config.t_max if config.t_max is not None else 1.05 * max(r.time for r in records)
        if max(config.eval_times) > t_max:
            raise ValidationError(
                f"eval_times exceed the study horizon t_max={t_max:.6g}"
            )
        records = list(_cap_records(records, t_max))

        n_events = sum(r.event for r in records)
        if len(records) < config.min_site1_records or n_events < config.min_site1_events:
            raise InitializationError(
                f"site 1 ({self.site_id}) has {len(records)} records / {n_events} events; "
                f"needs >= {config.min_site1_records} records and >= {config.min_site1_events} "
                "events to fit the initial spline. Reorder sites so a larger one leads."
            )
        groups = _group_names(records)
        weights = self._weights(records, config, broadcast)

        knots = knots_from_quantiles(np.array([r.time for r in records]), config.initial_knots, t_max)
        grid = default_grid(t_max)
        group_params = {}
        for g in groups:
            idx = _group_indices(records, g)
            recs = [records[i] for i in idx]
            w = weights[idx]
            if not recs or sum(r.event for r in recs) == 0:
                raise InitializationError(
                    f"site 1 ({self.site_id}) has no events in group {g!r}; the initial "
                    "curve for that group is not identifiable. Reorder sites so a site "
                    "with events in every group leads."
                )
            km = km_fit_weighted(recs) if config.mode == "ipw" else km_fit(recs)
            times = np.array([r.time for r in recs])
            s_grid = km.evaluate(grid)
            y_grid = _empirical_at_risk(times, w, grid)
            group_params[g] = fit_params(
                grid,
                clamp_probability(s_grid),
                clamp_probability(y_grid),
                knots,
                config.degree,
                config.link,
                t_max,
                n_cum=len(recs),
            )

        acc = InferenceAccumulators.empty(config.eval_times, groups=groups)
        if broadcast is not None:
            bmsg = deserialize_message(broadcast)
            acc.n_treated = bmsg.accumulators.n_treated
            acc.n_total = bmsg.accumulators.n_total
        msg = SiteMessage(
            pass_id=PASS_CURVES,
            accumulators=acc,
            group_params=group_params,
            propensity=deserialize_message(broadcast).propensity if broadcast is not None else None,
        )
        if config.mode == "ipw":
            self._accumulate(msg, records, weights, config)
        msg.site_trace.append((self.site_id, len(records), _timestamp()))
        return serialize_message(msg)

    def update_curves(self, msg_bytes, config, broadcast=None, diagnostics=None):
        msg = deserialize_message(msg_bytes)
        if msg.pass_id != PASS_CURVES:
            raise ProtocolError(f"pass_id: expected {PASS_CURVES}", field_path="pass_id")
        if msg.group_params is None or "overall" not in msg.group_params:
            raise ProtocolError("group_params: missing curves", field_path="group_params")
        overall = msg.group_params["overall"]
        t_max = overall.t_max
        records = list(_cap_records(self.dataset.records, t_max))
        groups = tuple(sorted(msg.group_params))
        if set(_group_names(records)) - set(groups) and len(groups) > 1:
            raise ValidationError("site exposes arms unknown to the study groups")

        weights = self._weights(records, config, broadcast)

        # grow the basis when the cumulative count crosses a threshold;
        # insertion keeps every group's current curve exactly representable
        target = config.target_knots(overall.n_cum)
        if target > overall.knots.size:
            additions = plan_knot_additions(overall, target)
            if additions.size:
                for g in groups:
                    msg.group_params[g] = insert_knots(msg.group_params[g], additions)

        # running weight totals from prior sites, read before local sums
        cum_weights = {g: msg.accumulators.sum_w.get(g, 0.0) for g in groups}

        if config.mode == "ipw":
            self._accumulate(msg, records, weights, config)

        policy = config.update_policy()
        for g in groups:
            idx = _group_indices(records, g)
            if not idx:
                continue
            recs = [records[i] for i in idx]
            w_g = weights[idx]
            params = msg.group_params[g]
            cum_w = cum_weights[g] if config.mode == "ipw" else None
            pos = 0
            while pos < len(recs):
                size = config.batch_for(params.n_cum)
                floor = _adaptive_floor(params.n_cum)
                chunk = _screen_tail_events(recs[pos : pos + size], params, diagnostics, floor)
                if config.mode == "ipw":
                    params, cum_w = update_weighted_batch(
                        params, chunk, w_g[pos : pos + size], cum_w, policy, diagnostics,
                        atrisk_floor=floor,
                    )
                else:
                    params = update_batch(
                        params, UpdateBatch(records=tuple(chunk)), policy, diagnostics,
                        atrisk_floor=floor,
                    )
                pos += size
            msg.group_params[g] = params

        msg.site_trace.append((self.site_id, len(records), _timestamp()))
        return serialize_message(msg)

    # -- helpers -------------------------------------------------------------

    def _weights(self, records, config, broadcast):
        if config.mode != "ipw":
            return np.ones(len(records))
        if broadcast is None:
            raise ValidationError("ipw mode requires the broadcast propensity message")
        bmsg = deserialize_message(broadcast)
        if bmsg.propensity is None:
            raise ProtocolError("propensity: broadcast carries no state", field_path="propensity")
        return weights_for(records, bmsg.propensity)

    def _accumulate(self, msg, records, weights, config):
        policy = config.ci_policy()
        groups = tuple(sorted(msg.group_params))
        for g in groups:
            idx = _group_indices(records, g)
            if not idx:
                continue
            params = msg.group_params[g]
            floor = _adaptive_floor(params.n_cum)
            chunk = _screen_tail_events([records[i] for i in idx], params, None, floor)
            accumulate_weighted_ci_batch(
                msg.accumulators,
                chunk,
                weights[idx],
                params,
                policy,
                group=g,
                atrisk_floor=floor,
            )
        if "arm1" in msg.group_params and msg.accumulators.n_total > 0:
            floor = _adaptive_floor(msg.group_params["overall"].n_cum)
            accumulate_weighted_logrank(
                msg.accumulators,
                records,
                weights,
                msg.group_params["arm1"],
                msg.group_params["overall"],
                policy,
                atrisk_floor=floor,
            )


def _validate_federation(sites):
    if not sites:
        raise ValidationError("federation needs at least one site")
    ids = [s.site_id for s in sites]
    if len(set(ids)) != len(ids):
        raise ValidationError("site ids must be unique")


def run_unweighted(sites, config, diagnostics=None):
    """Single sequential pass; returns the final StudyResult."""
    _validate_federation(sites)
    if config.mode != "unweighted":
        raise ValidationError("config.mode must be 'unweighted' for run_unweighted")
    diagnostics = diagnostics if diagnostics is not None else UpdateDiagnostics()
    site_objs = [Site(s) for s in sites]
    blob = site_objs[0].initialize_curves(config, diagnostics=diagnostics)
    for s in site_objs[1:]:
        blob = s.update_curves(blob, config, diagnostics=diagnostics)
    return assemble_result(blob, config, diagnostics)


def run_ipw(sites, config, diagnostics=None):
    """Two passes: renewable propensity fit, broadcast, weighted updates."""
    _validate_federation(sites)
    if config.mode != "ipw":
        raise ValidationError("config.mode must be 'ipw' for run_ipw")
    for s in sites:
        if any(r.arm is None for r in s.records):
            raise ValidationError(f"site {s.site_id}: ipw mode requires an arm for every record")
    diagnostics = diagnostics if diagnostics is not None else UpdateDiagnostics()
    site_objs = [Site(s) for s in sites]

    blob = site_objs[0].propensity_initialize(config)
    for s in site_objs[1:]:
        blob = s.propensity_advance(blob, config)
    broadcast = blob

    blob = site_objs[0].initialize_curves(config, broadcast=broadcast, diagnostics=diagnostics)
    for s in site_objs[1:]:
        blob = s.update_curves(blob, config, broadcast=broadcast, diagnostics=diagnostics)
    return assemble_result(blob, config, diagnostics)


def assemble_result(msg_bytes, config, diagnostics=None):
    """Build the StudyResult from the final message alone."""
    msg = deserialize_message(msg_bytes)
    if msg.group_params is None:
        raise ProtocolError("group_params: final message carries no curves", field_path="group_params")
    eval_times = np.asarray(config.eval_times, dtype=np.float64)
    policy = config.ci_policy()
    estimates, lower, upper = {}, {}, {}
    for g, params in msg.group_params.items():
        est = np.empty(eval_times.size)
        lo = np.empty(eval_times.size)
        hi = np.empty(eval_times.size)
        for j, t in enumerate(eval_times):
            if config.mode == "ipw":
                est[j], lo[j], hi[j] = weighted_ci(msg.accumulators, params, t, group=g)
            else:
                est[j], lo[j], hi[j] = ci_loglog(params, t, policy)
        estimates[g], lower[g], upper[g] = est, lo, hi

    logrank = {"method": None}
    if "arm0" in msg.group_params and "arm1" in msg.group_params:
        p1 = msg.group_params["arm1"]
        p0 = msg.group_params["arm0"]
        pall = msg.group_params["overall"]
        if config.mode == "ipw":
            l_stat, var_l, z, p = weighted_logrank(
                msg.accumulators, p1, p0, pall, p1.n_cum, p0.n_cum, policy
            )
            logrank = {
                "method": "weighted-influence",
                "statistic": l_stat,
                "variance": var_l,
                "z": z,
                "p_value": p,
            }
        else:
            stat, p = logrank_distributed(p1, p0, pall, p1.n_cum, p0.n_cum, policy)
            logrank = {"method": "curve-approximated", "statistic": stat, "p_value": p}

    diag = {
        "site_trace": [list(t) for t in msg.site_trace],
        "monotonicity_violations": getattr(diagnostics, "monotonicity_violations", 0),
        "tail_events_downgraded": getattr(diagnostics, "tail_events_downgraded", 0),
    }
    return StudyResult(
        method=config.mode,
        group_params=msg.group_params,
        eval_times=eval_times,
        estimates=estimates,
        lower=lower,
        upper=upper,
        logrank=logrank,
        diagnostics=diag,
    )
