"""Declarative experiments: presets, validation, execution and reporting.

A config is a YAML mapping with a ``kind`` and an explicit ``seed``; every
other key falls back to the preset of that kind, whose defaults are the
reference experiment settings.  :func:`run` writes CSV/JSON/SVG outputs
atomically plus a ``manifest.json`` listing SHA-256 checksums of every output.
"""
import copy
import csv
import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy import stats

from . import __version__
from . import dropout_oracle as oracle
from . import stats_lab as sl
from . import toy_dist as td
from .net_core import (NetworkSpec, SpecError, init_correlated, init_iid_gaussian, mc_sample,
                       mc_sample_layers, make_superposition_input, shuffle_weights)
from .rng import stream
from .serialization import load_weights, save_weights
from .trainer import Dataset, TrainConfig, evaluate, load_idx, train, weight_drift

__all__ = ["ConfigError", "ExperimentConfig", "KINDS", "PRESETS", "RunManifest", "StageError",
           "load_config", "report", "run", "validate"]

OUTPUT_ENV = "DROPOUT_GP_OUTPUT"

_NARROW = {"name": "narrow", "input_dim": 784, "hidden_widths": [100] * 9, "output_dim": 10}
_WIDE = {"name": "wide", "input_dim": 784, "hidden_widths": [1000] * 7, "output_dim": 10}
_NET_DEFAULTS = {"activation": "tanh", "keep_rate": 0.8, "bias_scheme": "zero"}

PRESETS = {
    "fig1_untrained": {"networks": [_NARROW, _WIDE], "n_passes": 30000, "n_neurons": 100,
                       "input": {"kind": "uniform01", "seed": 0}},
    "fig1_trained": {"networks": [_NARROW, _WIDE], "n_passes": 30000, "n_neurons": "all",
                     "n_show": 1, "input": {"kind": "idx", "split": "test", "index": 0},
                     "data": {}, "train": {"epochs": 100, "batch_size": 100, "learning_rate": 0.001,
                                           "dropout": 0.2}},
    "fig2_correlated": {"c": 0.1, "keep_rate": 0.8, "depth": 50, "widths": [100, 500, 1000, 2000],
                        "left_width": 1000, "compare_layer": 13, "n_passes": 30000,
                        "input": {"kind": "uniform_pm1"}},
    "fig3_weight_corr": {"networks": [_NARROW, _WIDE], "init": {"scheme": "iid"}, "bins": 100},
    "fig4_preact_corr": {"networks": [_NARROW, _WIDE], "init": {"scheme": "iid"}, "n_passes": 10000,
                         "n_neurons": 200, "bins": 100, "input": {"kind": "uniform01", "seed": 0}},
    "fig5_toy": {"mu": 0.0, "sigma": 1.0, "n_samples": 1_000_000, "grid": [-8.0, 8.0, 401]},
    "fig6_toy_mean": {"mu": 10.0, "sigma": 1.0, "n_samples": 1_000_000, "grid": [40.0, 180.0, 401]},
    "scaling_sweep": {"widths": [50, 100, 200, 400, 800], "inits": ["iid", "correlated"], "c": 0.1,
                      "seeds": [0, 1, 2], "layer": 3, "depth": 3, "input_dim": 50, "n_passes": 20000,
                      "n_neurons": 100, "subset_size": 5, "keep_rate": 0.8},
    "projection_diag": {"network": {"input_dim": 50, "hidden_widths": [800] * 3, "output_dim": 10},
                        "layer": 3, "subset_size": 5, "n_passes": 20000,
                        "input": {"kind": "uniform01", "seed": 0}},
    "train": {"network": {"input_dim": 784, "hidden_widths": [100] * 9, "output_dim": 10},
              "data": {}, "train": {"epochs": 100, "batch_size": 100, "learning_rate": 0.001,
                                    "dropout": 0.2}},
}
KINDS = tuple(PRESETS)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")
        self.stage = stage


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    params: dict
    output_dir: str = None
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        kind = d.get("kind")
        params = _merge(PRESETS.get(kind, {}), {k: v for k, v in d.items()
                                                if k not in ("kind", "seed", "output_dir")})
        return cls(kind, d.get("seed"), params, d.get("output_dir"), copy.deepcopy(d))

    def digest(self):
        blob = json.dumps({"kind": self.kind, "seed": self.seed, "params": self.params}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path):
    try:
        with open(path) as fh:
            return ExperimentConfig.from_dict(yaml.safe_load(fh))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def _net_dicts(cfg):
    p = cfg.params
    if "networks" in p:
        return p["networks"]
    if "network" in p:
        return [p["network"]]
    return []


def _spec(d, **override):
    kw = {**_NET_DEFAULTS, **{k: v for k, v in d.items() if k != "name"}, **override}
    return NetworkSpec(int(kw["input_dim"]), tuple(kw["hidden_widths"]), int(kw["output_dim"]),
                       kw["activation"], float(kw["keep_rate"]), kw["bias_scheme"],
                       float(kw.get("input_bound", 1.0)))


def validate(cfg):
    """Return a list of human-readable violations (empty when valid)."""
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    out = []
    if cfg.kind not in PRESETS:
        return [f"unknown experiment kind {cfg.kind!r}; expected one of {', '.join(KINDS)}"]
    if cfg.seed is None:
        out.append("explicit seed required")
    elif not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or cfg.seed < 0:
        out.append("seed must be a non-negative integer")
    p = cfg.params
    qs = [n.get("keep_rate", _NET_DEFAULTS["keep_rate"]) for n in _net_dicts(cfg)]
    if "keep_rate" in p:
        qs.append(p["keep_rate"])
    for q in qs:
        if not isinstance(q, (int, float)) or not 0 < q <= 1:
            out.append(f"keep rate q={q} outside (0, 1]")
    for n in _net_dicts(cfg):
        try:
            _spec(n)
        except (SpecError, KeyError, TypeError, ValueError) as exc:
            out.append(f"network {n.get('name', '')}: {exc}")
    init = p.get("init", {})
    correlated = cfg.kind == "fig2_correlated" or init.get("scheme") == "correlated"
    if correlated:
        c = p.get("c", init.get("c"))
        if c is None or not 0 <= c <= 1:
            out.append(f"correlation c={c} outside [0, 1]")
        for n in _net_dicts(cfg):
            hw = list(n.get("hidden_widths", []))
            if len(set(hw)) > 1:
                out.append("correlated init needs square hidden weight matrices (equal hidden widths)")
        if cfg.kind == "fig2_correlated":
            w = p.get("widths")
            if not isinstance(w, list) or not w or any(not isinstance(h, int) or h < 1 for h in w):
                out.append("correlated init needs square hidden weight matrices: widths must be "
                           "a list of positive integers, one per network")
            hw = p.get("hidden_widths")
            if hw is not None and len(set(hw)) > 1:
                out.append("correlated init needs square hidden weight matrices (equal hidden widths)")
            if not 1 <= p.get("compare_layer", 0) < p.get("depth", 0):
                out.append("compare_layer must lie in [1, depth)")
    for key in ("n_passes", "n_samples"):
        if key in p and (not isinstance(p[key], int) or p[key] < 2):
            out.append(f"{key} must be an integer >= 2")
    if cfg.kind in ("fig1_trained", "train"):
        data = p.get("data", {})
        if "weights" not in p and not data.get("train_images"):
            out.append("data.train_images/train_labels (or weights) required")
        try:
            TrainConfig(**{k: v for k, v in p.get("train", {}).items() if k != "n_train"})
        except (TypeError, ValueError) as exc:
            out.append(f"train: {exc}")
    return out


# ---------------------------------------------------------------- output plumbing

class _Writer:
    def __init__(self, root):
        self.root = root
        self.files = {}
        os.makedirs(root, exist_ok=True)

    def _commit(self, name, data):
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, os.path.join(self.root, name))
        self.files[name] = hashlib.sha256(data).hexdigest()

    def text(self, name, text):
        self._commit(name, text.encode())

    def json(self, name, obj):
        self.text(name, json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n")

    def via_path(self, name, fn):
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-", suffix=os.path.splitext(name)[1])
        os.close(fd)
        try:
            fn(tmp)
            with open(tmp, "rb") as fh:
                data = fh.read()
        finally:
            os.remove(tmp)
        self._commit(name, data)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


@dataclass
class RunManifest:
    kind: str
    config_hash: str
    tool_version: str
    outputs: dict
    runtime: dict
    directory: str = None

    def to_dict(self):
        return {"kind": self.kind, "config_hash": self.config_hash, "tool_version": self.tool_version,
                "outputs": self.outputs, "runtime": self.runtime}

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "manifest.json")) as fh:
            d = json.load(fh)
        return cls(directory=directory, **d)


def _input(spec_d, dim, seed, data=None):
    kind = spec_d.get("kind", "uniform01")
    s = spec_d.get("seed", seed)
    if kind == "uniform01":
        return stream(s, "input").random(dim)
    if kind == "uniform_pm1":
        return stream(s, "input").uniform(-1.0, 1.0, dim)
    if kind in ("idx", "superposition"):
        if data is None:
            raise ValueError("image input requires data paths")
        if kind == "idx":
            return data.images[int(spec_d.get("index", 0))]
        a, b = spec_d.get("indices", [0, 1])
        return make_superposition_input(data.images[a], data.images[b])
    raise ValueError(f"unknown input kind {kind!r}")


def _load_split(p, split):
    d = p.get("data", {})
    if not d.get(f"{split}_images"):
        return None
    return load_idx(d[f"{split}_images"], d[f"{split}_labels"], split)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _neuron_reports(samples, neurons, tail=True):
    reports = []
    for j, n in enumerate(neurons):
        r = sl.normality_report(samples[:, j], neuron=int(n), with_tail=tail)
        reports.append(r.with_label(sl.classify_neuron(r)))
    return reports


def _proportions(reports):
    labels = [r.label for r in reports]
    return {c: labels.count(c) / len(labels) for c in sl.CLASSES}


# ---------------------------------------------------------------- pipelines

def _fig1_untrained(cfg, w):
    p, summary = cfg.params, {"networks": {}}
    for net in p["networks"]:
        name = net.get("name", "net")
        spec = _spec(net)
        ws = _stage("init", init_iid_gaussian, spec, cfg.seed)
        x = _stage("input", _input, p["input"], spec.input_dim, cfg.seed)
        h, layer = spec.hidden_widths[-1], spec.depth
        k = h if p["n_neurons"] == "all" else min(int(p["n_neurons"]), h)
        neurons = np.sort(stream(cfg.seed, "neuron-pick").choice(h, k, replace=False))
        batch = _stage("sample", mc_sample, ws, x, layer, p["n_passes"], cfg.seed, neurons=neurons)
        reports = _stage("statistics", _neuron_reports, batch.samples, neurons)
        w.text(f"{name}_neurons.csv", sl.reports_to_csv(reports))
        pick = int(stream(cfg.seed, "display-pick").integers(k))
        w.text(f"{name}_histogram.csv", sl.histogram(sl.normalize(batch.samples[:, pick]), bins=80).to_csv())
        _svg(w, f"{name}_histogram.svg", batch.samples[:, pick], f"{name}, neuron {neurons[pick]}")
        summary["networks"][name] = {
            "layer": layer, "n_neurons": k, "jb_pass_fraction": float(np.mean([r.jb_pvalue > 0.01 for r in reports])),
            "class_proportions": _proportions(reports), "displayed_neuron": int(neurons[pick])}
    return summary


def _svg(w, name, samples, title, overlays=("normal", "laplace")):
    from .plotting import render_histogram_svg
    w.via_path(name, lambda path: render_histogram_svg(samples, path, overlays=overlays, title=title))


def _fig1_trained(cfg, w):
    p, summary = cfg.params, {"networks": {}}
    train_d = _stage("data", _load_split, p, "train")
    test_d = _stage("data", _load_split, p, "test")
    tcfg = {k: v for k, v in p["train"].items() if k != "n_train"}
    for net in p["networks"]:
        name = net.get("name", "net")
        spec = _spec(net, keep_rate=1.0 - p["train"].get("dropout", 0.2))
        if net.get("weights"):
            ws = _stage("load-weights", load_weights, net["weights"])
        else:
            data = train_d.subset(p["train"]["n_train"]) if p["train"].get("n_train") else train_d
            ws = _stage("train", train, spec, data, TrainConfig(**tcfg), cfg.seed, test_d).final
            w.via_path(f"{name}_weights.dgpl", lambda path: save_weights(ws, path))
        src = test_d if p["input"].get("split", "test") == "test" else train_d
        x = _stage("input", _input, p["input"], spec.input_dim, cfg.seed, src)
        h, layer = spec.hidden_widths[-1], spec.depth
        k = h if p["n_neurons"] == "all" else min(int(p["n_neurons"]), h)
        neurons = np.sort(stream(cfg.seed, "neuron-pick").choice(h, k, replace=False))
        batch = _stage("sample", mc_sample, ws, x, layer, p["n_passes"], cfg.seed, neurons=neurons)
        reports = _stage("statistics", _neuron_reports, batch.samples, neurons)
        w.text(f"{name}_neurons.csv", sl.reports_to_csv(reports))
        shown = _select_display(reports, p.get("n_show", 1))
        for label, idx in shown.items():
            for rank, j in enumerate(idx):
                _svg(w, f"{name}_{label}_{rank}.svg", batch.samples[:, j], f"{name}: {label}")
        shuffled = shuffle_weights(ws, cfg.seed)
        sb = _stage("shuffle-control", mc_sample, shuffled, x, layer, p["n_passes"], cfg.seed, neurons=neurons)
        summary["networks"][name] = {
            "class_proportions": _proportions(reports),
            "jb_pass_fraction": float(np.mean([r.jb_pvalue > 0.01 for r in reports])),
            "shuffled_jb_pass_fraction": sl.jb_pass_fraction(sb.samples),
            "test_accuracy": None if test_d is None else evaluate(ws, test_d),
            "displayed": {k_: [int(neurons[j]) for j in v] for k_, v in shown.items()}}
    return summary


def _select_display(reports, n_show):
    """Top-``n_show`` neurons per class: highest JB p-value, largest |skew|, smallest tail exponent."""
    keys = {"gaussian": lambda r: -r.jb_pvalue, "skewed_gaussian": lambda r: -abs(r.skewness),
            "exponential_tail": lambda r: r.tail.beta if r.tail else np.inf}
    out = {}
    for label, key in keys.items():
        idx = [j for j, r in enumerate(reports) if r.label == label]
        out[label] = sorted(idx, key=lambda j: key(reports[j]))[:n_show]
    return out


def _fig2(cfg, w):
    p = cfg.params
    nu_cmp = p["compare_layer"] + 1  # hidden layer l is the l-th stochastic layer
    summary = {"compare_layer": p["compare_layer"], "widths": {}, "layers": {}}
    for h in p["widths"]:
        spec = NetworkSpec(h, tuple(p.get("hidden_widths") or (h,) * p["depth"]), h, "tanh",
                           p["keep_rate"], "zero")
        ws = _stage("init", init_correlated, spec, p["c"], cfg.seed)
        x = _stage("input", _input, p["input"], h, cfg.seed + h)
        neuron = int(stream(cfg.seed, "fig2-neuron", h).integers(h))
        layers = list(range(2, p["depth"] + 2)) if h == p["left_width"] else [nu_cmp]
        batches = _stage("sample", mc_sample_layers, ws, x, layers, p["n_passes"], cfg.seed,
                         neurons=np.array([neuron]))
        s = batches[nu_cmp].samples[:, 0]
        r = sl.normality_report(s, neuron=neuron)
        summary["widths"][str(h)] = {"excess_kurtosis": r.excess_kurtosis, "skewness": r.skewness,
                                     "tail_beta": r.tail.beta if r.tail else None}
        w.text(f"width{h}_layer{p['compare_layer']}_histogram.csv", sl.histogram(sl.normalize(s), bins=80).to_csv())
        _svg(w, f"width{h}_layer{p['compare_layer']}.svg", s, f"h={h}, layer {p['compare_layer']}")
        if h == p["left_width"]:
            for nu in layers:
                r = sl.normality_report(batches[nu].samples[:, 0], neuron=neuron)
                summary["layers"][str(nu - 1)] = {"excess_kurtosis": r.excess_kurtosis,
                                                  "tail_beta": r.tail.beta if r.tail else None}
            w.text(f"width{h}_layers_histograms.csv", "".join(
                f"# layer {nu - 1}\n" + sl.histogram(sl.normalize(batches[nu].samples[:, 0]), bins=80).to_csv()
                for nu in layers))
    k = [v["excess_kurtosis"] for v in summary["widths"].values()]
    summary["kurtosis_relative_spread"] = float((max(k) - min(k)) / np.mean(k))
    return summary


def _weights_for(net, cfg):
    spec = _spec(net)
    init = cfg.params.get("init", {"scheme": "iid"})
    if init.get("scheme") == "correlated":
        return init_correlated(spec, init["c"], cfg.seed)
    return init_iid_gaussian(spec, cfg.seed)


def _fig3(cfg, w):
    summary = {"networks": {}}
    for net in cfg.params["networks"]:
        name, ws = net.get("name", "net"), _stage("init", _weights_for, net, cfg)
        rows = []
        for nu in range(2, ws.spec.n_layers):
            for axis in ("rows", "cols"):
                cs = _stage("statistics", sl.pearson_offdiag, ws.weight(nu), axis, nu, cfg.params["bins"])
                w.text(f"{name}_layer{nu}_{axis}.csv", cs.histogram.to_csv())
                rows.append({"layer": nu, "axis": axis, "mean": cs.mean, "mean_abs": cs.mean_abs,
                             "std": float(np.sqrt(cs.variance))})
        summary["networks"][name] = rows
    return summary


def _fig4(cfg, w):
    p, summary = cfg.params, {"networks": {}}
    for net in p["networks"]:
        name, ws = net.get("name", "net"), _stage("init", _weights_for, net, cfg)
        x = _stage("input", _input, p["input"], ws.spec.input_dim, cfg.seed)
        layers = list(range(2, ws.spec.depth + 1))
        neurons = {nu: np.sort(stream(cfg.seed, "corr-pick", nu).choice(
            ws.spec.widths[nu], min(p["n_neurons"], ws.spec.widths[nu]), replace=False)) for nu in layers}
        batches = _stage("sample", mc_sample_layers, ws, x, layers, p["n_passes"], cfg.seed, neurons=neurons)
        rows = []
        for nu in layers:
            cs = _stage("statistics", sl.preact_correlations, batches[nu], bins=p["bins"])
            wr = sl.pearson_offdiag(ws.weight(nu), "rows", nu)
            w.text(f"{name}_layer{nu}.csv", cs.histogram.to_csv())
            rows.append({"layer": nu, "mean_abs": cs.mean_abs, "variance": cs.variance,
                         "weight_rows_mean_abs": wr.mean_abs})
        summary["networks"][name] = rows
    return summary


def _toy(cfg, w, approx):
    p = cfg.params
    params = td.ProductModelParams(p["mu"], p["mu"], p["sigma"], p["sigma"])
    z = _stage("sample", td.sample_product, params, p["n_samples"], cfg.seed)
    lo, hi, n = p["grid"]
    grid = np.linspace(lo, hi, int(n))
    h = sl.histogram(z, bins=200, range=(lo, hi))
    w.text("histogram.csv", h.to_csv())
    from .plotting import render_curves_svg
    centers = 0.5 * (h.edges[1:] + h.edges[:-1])
    curves = {"samples": (centers, np.maximum(h.density, 1e-300) * h.mass)}
    summary = {"n_samples": p["n_samples"], "skewness": float(stats.skew(z)),
               "excess_kurtosis": float(stats.kurtosis(z))}
    if approx:
        dens = td.erfc_approx_pdf(grid, params)
        w.text("erfc_approx.csv", td.pdf_grid_csv(grid, dens))
        curves["erfc approximation"] = (grid, dens)
    else:
        g = grid[grid != 0]
        dens = td.product_pdf(g, p["sigma"], p["sigma"])
        w.text("exact_pdf.csv", td.pdf_grid_csv(g, dens))
        curves["K0 law"] = (g, dens)
        summary["ks_vs_exact"] = float(stats.kstest(z, lambda v: td.product_cdf(v, p["sigma"], p["sigma"])).statistic)
        summary["tail_beta"] = sl.tail_fit(z / p["sigma"] ** 2, window=(2.0, 6.0), absolute=True,
                                           zscore=False, prefactor=0.5).beta
    w.via_path("pdf.svg", lambda path: render_curves_svg(curves, path))
    return summary


def _sweep(cfg, w):
    p = cfg.params
    net_kw = {"depth": p["depth"], "keep_rate": p["keep_rate"]}
    out, lines = {}, ["init,metric,width,value,spread"]
    for init in p["inits"]:
        corr = _stage("correlation-sweep", oracle.covariance_scaling_sweep, p["widths"], init=init,
                      seeds=tuple(p["seeds"]), layer=p["layer"], n_passes=p["n_passes"],
                      n_neurons=p["n_neurons"], c=p["c"], input_dim=p["input_dim"], **net_kw)
        tables = {"mean_abs_corr": corr}
        if init == "iid":
            tables["lyapunov_ratio"] = _stage("lyapunov-sweep", sl.lyapunov_scaling_sweep, p["widths"],
                                              seeds=tuple(p["seeds"]), layer=p["layer"],
                                              subset_size=p["subset_size"], n_passes=p["n_passes"],
                                              input_dim=p["input_dim"], **net_kw)
        for metric, t in tables.items():
            slope, se = t.loglog_slope()
            out[f"{init}/{metric}"] = {"slope": slope, "slope_ci95": [slope - 1.96 * se, slope + 1.96 * se],
                                      "values": t.values.tolist(), "widths": t.widths.tolist()}
            lines += [f"{init},{metric},{int(h)},{v!r},{s!r}" for h, v, s in zip(t.widths, t.values, t.spread)]
    w.text("sweep.csv", "\n".join(lines) + "\n")
    return {"sweeps": out}


def _projection(cfg, w):
    p = cfg.params
    spec = _spec(p["network"])
    ws = _stage("init", init_iid_gaussian, spec, cfg.seed)
    x = _stage("input", _input, p["input"], spec.input_dim, cfg.seed)
    h = spec.widths[p["layer"]]
    r = stream(cfg.seed, "projection", h)
    subset = np.sort(r.choice(h, p["subset_size"], replace=False))
    t = r.standard_normal(subset.size)
    batch = _stage("sample", mc_sample, ws, x, p["layer"], p["n_passes"], cfg.seed, neurons=subset,
                   keep_inputs=True)
    d = _stage("statistics", sl.cramer_wold_projection, batch, subset, t)
    rep = sl.normality_report(d.psi)
    w.text("psi_histogram.csv", sl.histogram(d.psi, bins=80).to_csv())
    _svg(w, "psi.svg", d.psi, "projection")
    return {"subset": subset.tolist(), "t": t.tolist(), "s_n": d.s_n, "lyapunov_ratio": d.lyapunov_ratio,
            "jb_pvalue": rep.jb_pvalue, "excess_kurtosis": rep.excess_kurtosis}


def _train(cfg, w):
    p = cfg.params
    tr = _stage("data", _load_split, p, "train")
    te = _stage("data", _load_split, p, "test")
    if tr is None:
        raise StageError("data", FileNotFoundError("no training data configured"))
    if p["train"].get("n_train"):
        tr = tr.subset(p["train"]["n_train"])
    tcfg = TrainConfig(**{k: v for k, v in p["train"].items() if k != "n_train"})
    spec = _spec(p["network"], keep_rate=1.0 - tcfg.dropout)
    rep = _stage("train", train, spec, tr, tcfg, cfg.seed, te)
    w.via_path("weights.dgpl", lambda path: save_weights(rep.final, path))
    w.text("train_report.json", rep.to_json() + "\n")
    return {"train_loss": rep.train_loss, "test_accuracy": rep.test_accuracy,
            "weight_drift": weight_drift(rep.initial, rep.final).tolist()}


PIPELINES = {
    "fig1_untrained": _fig1_untrained, "fig1_trained": _fig1_trained, "fig2_correlated": _fig2,
    "fig3_weight_corr": _fig3, "fig4_preact_corr": _fig4,
    "fig5_toy": lambda c, w: _toy(c, w, False), "fig6_toy_mean": lambda c, w: _toy(c, w, True),
    "scaling_sweep": _sweep, "projection_diag": _projection, "train": _train,
}


def run(cfg, output_root=None):
    """Execute a validated config; returns the :class:`RunManifest`.

    Raises
    ------
    ConfigError
        If :func:`validate` reports violations.
    StageError
        If a pipeline stage fails.
    """
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    problems = validate(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    root = cfg.output_dir or os.path.join(output_root or os.environ.get(OUTPUT_ENV, "runs"), cfg.kind)
    w = _Writer(root)
    start = time.perf_counter()
    summary = PIPELINES[cfg.kind](cfg, w)
    w.json("summary.json", {"kind": cfg.kind, "seed": cfg.seed, **summary})
    w.text("config.yaml", yaml.safe_dump({"kind": cfg.kind, "seed": cfg.seed, **cfg.params}, sort_keys=True))
    m = RunManifest(cfg.kind, cfg.digest(), __version__, dict(sorted(w.files.items())),
                    {"seconds": round(time.perf_counter() - start, 3)}, root)
    w.json("manifest.json", m.to_dict())
    return m


# ---------------------------------------------------------------- report

def _find_manifests(paths):
    found = []
    for p in paths:
        for dirpath, _, files in os.walk(p):
            if "manifest.json" in files:
                found.append(dirpath)
    return sorted(found)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, dict):
        return ", ".join(f"{k}={_fmt(x)}" for k, x in v.items())
    if isinstance(v, list) and len(v) > 6:
        return f"[{len(v)} values]"
    return str(v)


def report(paths):
    """Aggregate the summaries of every run found under ``paths`` into Markdown.

    Raises
    ------
    FileNotFoundError
        If a manifest references an output missing on disk.
    """
    dirs = _find_manifests(paths)
    if not dirs:
        return "EMPTY REPORT: no run manifests found\n"
    lines = ["# Run report", ""]
    for d in dirs:
        m = RunManifest.load(d)
        for name, digest in m.outputs.items():
            fp = os.path.join(d, name)
            if not os.path.exists(fp):
                raise FileNotFoundError(f"{d}: manifest lists missing output {name}")
            with open(fp, "rb") as fh:
                if hashlib.sha256(fh.read()).hexdigest() != digest:
                    raise ValueError(f"{d}: checksum mismatch for {name}")
        with open(os.path.join(d, "summary.json")) as fh:
            s = json.load(fh)
        lines += [f"## {m.kind} ({d})", "", f"config {m.config_hash[:12]}, version {m.tool_version}, "
                  f"{m.runtime.get('seconds')} s", ""]
        for k, v in s.items():
            if k in ("kind", "seed"):
                continue
            if isinstance(v, dict):
                for sub, val in v.items():
                    lines.append(f"- {k}/{sub}: {_fmt(val)}")
            else:
                lines.append(f"- {k}: {_fmt(v)}")
        for name in m.outputs:
            if name.endswith("_neurons.csv"):
                lines += ["", f"### {name}", "", "| neuron | skew | ex. kurtosis | JB p | tail beta | class |",
                          "|---|---|---|---|---|---|"]
                with open(os.path.join(d, name)) as fh:
                    for row in csv.DictReader(fh):
                        beta = f"{float(row['tail_beta']):.3f}" if row["tail_beta"] else "-"
                        lines.append(f"| {row['neuron']} | {float(row['skewness']):.3f} | "
                                     f"{float(row['excess_kurtosis']):.3f} | {float(row['jb_pvalue']):.3g} | "
                                     f"{beta} | {row['label']} |")
        lines.append("")
    return "\n".join(lines)
