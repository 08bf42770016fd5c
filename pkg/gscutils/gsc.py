#!/usr/bin/env python
# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

import os
import click
import numpy as np
import importlib.metadata as im

from typing import *
from gscutils import msg, formats, selection
from gscutils import scores as sc
from gscutils import synthetic as syn
from gscutils import asymptotics as asym
from gscutils import manifest as mf
from gscutils.config import Config, config, find_config_file
from gscutils.data import EvalSet, ClassifierHead, ScoreId, ScoreVector, SPLIT_MIXES, draw_calibration, mix_mask
from gscutils.errors import GscError, ManifestError, ValidationError, MissingHead, MissingFeatures, EmptyPrefix
from gscutils.errors import InsufficientCalibrationData, DegenerateSpectrum, ZeroVariance
from gscutils.oodmetrics import ood_vs_sc_report, appendix_c_fixture

DEFAULT_CONFIG = "gsc.toml"
CONTEXT_SETTINGS = dict(help_option_names=['-h', '--help'])

# scores whose configuration is fitted on a calibration draw
CALIBRATED = (ScoreId.KNN, ScoreId.VIM, ScoreId.SIRC)

# everything that can be evaluated on the 2D mixture without calibration data
SYNTH_SCORES: tuple[syn.SyntheticScore, ...] = (
    ScoreId.SR_MAX,
    ScoreId.SR_DOCTOR,
    ScoreId.SR_ENT,
    ScoreId.CONF_MARGIN,
    ScoreId.GEO_MARGIN,
    ScoreId.RL_MAX,
    ScoreId.ENERGY,
    "s_post",
)


class _Group(click.Group):
	def invoke(self, ctx: click.Context) -> Any:
		try:
			return super().invoke(ctx)
		except (ManifestError, ValidationError) as e:
			problems = e.problems if isinstance(e, ManifestError) else e.violations
			msg.error(f"{type(e).__name__}: {len(problems)} problem{'' if len(problems) == 1 else 's'}")
			for p in problems:
				msg.error2(p)
			ctx.exit(2)
		except GscError as e:
			msg.error(f"{type(e).__name__}: {e}")
			ctx.exit(2)


def _float_list(ctx: Any, param: Any, value: Optional[str]) -> Optional[tuple[float, ...]]:
	if value is None:
		return None
	try:
		return tuple(float(x) for x in value.split(',') if x.strip() != "")
	except ValueError:
		raise click.BadParameter(f"expected a comma-separated list of numbers, got '{value}'")


def _int_list(ctx: Any, param: Any, value: Optional[str]) -> Optional[tuple[int, ...]]:
	if value is None:
		return None
	try:
		return tuple(int(x) for x in value.split(',') if x.strip() != "")
	except ValueError:
		raise click.BadParameter(f"expected a comma-separated list of integers, got '{value}'")


def _grid(ctx: Any, param: Any, value: Optional[str]) -> Optional[tuple[float, float, int]]:
	if value is None:
		return None
	parts = value.split(',')
	try:
		if len(parts) != 3:
			raise ValueError
		return float(parts[0]), float(parts[1]), int(parts[2])
	except ValueError:
		raise click.BadParameter(f"expected 'lo,hi,n', got '{value}'")


SCORE_CHOICE = click.Choice([s.value for s in ScoreId])
SPLIT_CHOICE = click.Choice(list(SPLIT_MIXES.keys()))
MANIFEST_PATH = click.Path(exists=True, dir_okay=False)


def _seed(seed: Optional[int]) -> int:
	return seed if seed is not None else config().synthetic.seed


def _load(ctx: Any, manifest: str) -> tuple[EvalSet, Optional[ClassifierHead]]:
	Config.load(ctx.meta["config_file"])
	return mf.load_evalset(manifest)


def _score(
    es: EvalSet,
    head: Optional[ClassifierHead],
    score_id: ScoreId,
    seed: int,
    k: Optional[int] = None,
    vim_dim: Optional[int] = None,
) -> ScoreVector:
	cfg = config().scores
	cal = draw_calibration(es, seed, cfg.calibration_multiplier) if score_id in CALIBRATED else None

	configs = sc.fit_configs(
	    es,
	    score_id,
	    head=head,
	    cal=cal,
	    knn_k=k if k is not None else cfg.knn_k,
	    vim_dim=vim_dim if vim_dim is not None else cfg.vim_dim,
	    sirc_secondary=ScoreId.parse(cfg.sirc_secondary),
	)
	return sc.score_set(es, score_id, configs)


def _rc_summary(curve: selection.RCCurve, alphas: Iterable[float]) -> dict[str, Optional[float]]:
	out: dict[str, Optional[float]] = { "aurc": selection.aurc(curve) }
	for a in alphas:
		try:
			out[selection.alpha_key(a)] = selection.aurc_alpha(curve, a)
		except EmptyPrefix:
			msg.warn2(f"Too few samples for AURC-{a:g}")
			out[selection.alpha_key(a)] = None
	return out


def _json_path(out: str) -> str:
	return f"{os.path.splitext(out)[0]}.json"


@click.group(cls=_Group, context_settings=CONTEXT_SETTINGS)
@click.pass_context
@click.option(
    "-c", "--config", metavar="CONFIG", default=DEFAULT_CONFIG, required=False, help="The configuration file to use"
)
@click.option("-q", "--quiet", is_flag=True, default=False, help="Only print results and errors")
@click.version_option(im.version("gscutils"), "--version", "-V", prog_name="gscutils")
def cli(ctx: Any, config: str, quiet: bool) -> int:
	msg.set_quiet(quiet)

	# an explicitly named config must exist; the default one is optional
	if ctx.get_parameter_source("config") == click.core.ParameterSource.COMMANDLINE and not os.path.exists(config):
		msg.error_and_exit(f"Could not load config file '{config}'")

	ctx.meta["config_file"] = find_config_file(config)
	return 0


@cli.command(name="score", help="Score every row of a dataset")
@click.pass_context
@click.option("--manifest", metavar="MANIFEST", required=True, type=MANIFEST_PATH, help="The dataset manifest")
@click.option("--score", "score_name", metavar="SCORE", required=True, type=SCORE_CHOICE, help="The score function")
@click.option("--k", "k", type=int, default=None, help="Neighbour rank for the KNN score")
@click.option("--vim-dim", type=int, default=None, help="Principal subspace dimension for ViM")
@click.option("--seed", type=int, default=None, help="Seed for the calibration draw")
@click.option("--out", metavar="PATH", required=True, help="Output CSV")
def cmd_score(ctx: Any, manifest: str, score_name: str, k: Optional[int], vim_dim: Optional[int], seed: Optional[int], out: str):
	es, head = _load(ctx, manifest)
	scores = _score(es, head, ScoreId(score_name), _seed(seed), k, vim_dim)

	formats.write_scores(out, scores)
	msg.log(f"Wrote {len(scores)} '{score_name}' scores to '{out}'")


@cli.command(name="rc", help="Risk-coverage curve and AURC summary")
@click.pass_context
@click.option("--manifest", metavar="MANIFEST", required=True, type=MANIFEST_PATH, help="The dataset manifest")
@click.option("--score", "score_name", metavar="SCORE", required=True, type=SCORE_CHOICE, help="The score function")
@click.option("--splits", type=SPLIT_CHOICE, default="all", help="Which shift types to mix into the evaluation")
@click.option("--k", "k", type=int, default=None, help="Neighbour rank for the KNN score")
@click.option("--vim-dim", type=int, default=None, help="Principal subspace dimension for ViM")
@click.option("--seed", type=int, default=None, help="Seed for the calibration draw")
@click.option("--out", metavar="PATH", required=True, help="Output CSV (the summary goes next to it as JSON)")
def cmd_rc(
    ctx: Any,
    manifest: str,
    score_name: str,
    splits: str,
    k: Optional[int],
    vim_dim: Optional[int],
    seed: Optional[int],
    out: str,
):
	es, head = _load(ctx, manifest)

	# calibration and fitting see the whole set; only the evaluation is restricted
	scores = _score(es, head, ScoreId(score_name), _seed(seed), k, vim_dim)
	mask = mix_mask(es, splits)
	if not mask.any():
		msg.error_and_exit(f"No rows in split mix '{splits}'")

	loss = selection.losses(es).values[mask]
	curve = selection.rc_curve(scores.values[mask], loss)
	formats.write_curve(out, curve)

	summary: dict[str, Any] = {
	    "score": score_name,
	    "splits": splits,
	    "n": int(mask.sum()),
	    "error_rate": float(loss.mean()),
	    **_rc_summary(curve, config().report.alphas),
	}
	formats.write_json(_json_path(out), summary)

	msg.log(f"RC curve of '{score_name}' on '{splits}' ({summary['n']} rows)")
	with msg.Indent():
		for key in sorted(x for x in summary if x.startswith("aurc") and summary[x] is not None):
			msg.metric(key, summary[key])

	click.echo(formats.dumps_json(summary), nl=False)


@cli.command(name="calibrate", help="Calibrate a rejection threshold on a calibration draw")
@click.pass_context
@click.option("--manifest", metavar="MANIFEST", required=True, type=MANIFEST_PATH, help="The dataset manifest")
@click.option("--score", "score_name", metavar="SCORE", required=True, type=SCORE_CHOICE, help="The score function")
@click.option("--target", metavar="TARGET", required=True, help="coverage:<w> or risk:<l>")
@click.option("--k", "k", type=int, default=None, help="Neighbour rank for the KNN score")
@click.option("--vim-dim", type=int, default=None, help="Principal subspace dimension for ViM")
@click.option("--seed", type=int, default=None, help="Seed for the calibration draw")
def cmd_calibrate(
    ctx: Any,
    manifest: str,
    score_name: str,
    target: str,
    k: Optional[int],
    vim_dim: Optional[int],
    seed: Optional[int],
):
	es, head = _load(ctx, manifest)
	t = selection.parse_target(target)
	seed = _seed(seed)

	score_id = ScoreId(score_name)
	scores = _score(es, head, score_id, seed, k, vim_dim)
	loss = selection.losses(es).values

	cal = draw_calibration(es, seed, config().scores.calibration_multiplier)
	report = selection.calibrate_threshold(scores.values[cal.indices], loss[cal.indices], t)

	result: dict[str, Any] = { "score": score_name, "calibration_rows": len(cal), **report.to_json() }

	# deploy on everything that was not used for calibration
	rest = np.ones(es.n, dtype=bool)
	rest[cal.indices] = False
	if rest.any():
		cov, risk = selection.coverage_risk(scores.values[rest], loss[rest], report.gamma)
		result["deployed_coverage"] = cov
		result["deployed_risk"] = risk

	msg.log(f"Threshold for '{score_name}' at {report.target}")
	with msg.Indent():
		msg.metric("gamma", report.gamma)
		msg.metric("coverage", report.achieved_coverage)
		msg.metric("risk", report.achieved_risk)

	click.echo(formats.dumps_json(result), nl=False)


@cli.command(name="ood-metrics", help="Judge a score both as an OOD detector and as a selective classifier")
@click.pass_context
@click.option("--manifest", metavar="MANIFEST", required=False, type=MANIFEST_PATH, help="The dataset manifest")
@click.option("--score", "score_name", metavar="SCORE", required=False, type=SCORE_CHOICE, help="The score function")
@click.option("--demo", is_flag=True, default=False, help="Use the built-in crossover example instead of a manifest")
@click.option("--seed", type=int, default=None, help="Seed for the calibration draw (or the demo set)")
@click.option("--out", metavar="DIR", required=False, help="Also write RC curves and score histograms here")
def cmd_ood_metrics(ctx: Any, manifest: Optional[str], score_name: Optional[str], demo: bool, seed: Optional[int], out: Optional[str]):
	if demo == (manifest is not None):
		raise click.UsageError("give exactly one of --manifest or --demo")
	if manifest is not None and score_name is None:
		raise click.UsageError("--manifest needs --score")

	if demo:
		Config.load(ctx.meta["config_file"])
		es, named = appendix_c_fixture(_seed(seed))
	else:
		es, head = _load(ctx, cast(str, manifest))
		named = { cast(str, score_name): _score(es, head, ScoreId(score_name), _seed(seed)).values }

	rc = config().report
	result: dict[str, Any] = {}
	for name, s in named.items():
		report = ood_vs_sc_report(es, s, rc.tpr, rc.bins)
		result[name] = report.to_json()

		msg.log(f"{name}")
		with msg.Indent():
			for key, value in sorted(report.to_json().items()):
				if not isinstance(value, bool):
					msg.metric(key, value, width=28)

		if out is not None:
			formats.write_curve(f"{out}/{name}_rc.csv", report.curve)
			formats.write_histogram(f"{out}/{name}_hist.csv", report.bin_edges, report.histograms)

	click.echo(formats.dumps_json(result), nl=False)


@cli.command(name="synth", help="Sample the 4-class mixture and emit selection data for every score")
@click.pass_context
@click.option("--case", "case_id", type=click.Choice(["1", "2", "3"]), default="1", help="Perturbation case")
@click.option("--n", "per_class", type=int, default=None, help="Samples per class")
@click.option("--seed", type=int, default=None, help="Sampling seed")
@click.option("--coverage", type=float, default=None, help="Coverage at which to report rejected samples")
@click.option("--out", metavar="DIR", required=True, help="Output directory")
def cmd_synth(ctx: Any, case_id: str, per_class: Optional[int], seed: Optional[int], coverage: Optional[float], out: str):
	Config.load(ctx.meta["config_file"])
	cfg = config().synthetic
	seed = _seed(seed)
	per_class = per_class if per_class is not None else cfg.per_class
	coverage = coverage if coverage is not None else cfg.coverage

	spec = syn.MixtureSpec.default(cfg.variance)
	case = syn.PerturbationCase.of(int(case_id))
	classifier = syn.LinearClassifier2D.optimal(spec)

	sample = syn.sample_per_class(spec, per_class, seed)
	points = syn.perturb(sample.points, case, seed + 1)

	es, head = syn.mixture_evalset(syn.MixtureSample(points, sample.labels, sample.seed), classifier)
	os.makedirs(out, exist_ok=True)
	mf.write_manifest(f"{out}/manifest.json", es, head)

	loss = syn.sample_losses(classifier, points, sample.labels)
	radius = syn.robustness_radius(classifier, points)
	upper = float(radius.max())

	msg.log(f"Case {case.case_id}: {len(loss)} samples, full-coverage risk {loss.mean():.4f}")

	summary: dict[str, Any] = {}
	selected: dict[str, np.ndarray] = {}
	counts: dict[str, np.ndarray] = {}
	edges = np.zeros(0)

	with msg.Indent():
		for score in SYNTH_SCORES:
			name = syn.score_name(score)
			s = syn.synthetic_scores(spec, classifier, points, score)

			curve = selection.rc_curve(s, loss)
			formats.write_curve(f"{out}/rc_{name}.csv", curve)

			pattern = syn.rejection_pattern(classifier, points, s, coverage)
			radii = pattern.selected_radii()
			counts[name], edges = syn.radius_histogram(radii, config().report.bins, upper)
			selected[name] = pattern.selected

			summary[name] = {
			    **_rc_summary(curve, config().report.alphas),
			    "min_selected_radius": float(radii.min()) if len(radii) > 0 else None,
			}
			msg.metric(name, summary[name]["aurc"])

	formats.write_histogram(f"{out}/radius_hist.csv", edges, counts)

	origin = np.linalg.norm(points, axis=1)
	formats.write_csv(
	    f"{out}/rejection.csv",
	    ["x", "y", "label", "loss", "origin_distance", "radius", *(f"selected_{n}" for n in selected)],
	    (
	        [points[i, 0], points[i, 1], sample.labels[i], loss[i], origin[i], radius[i], *(bool(v[i]) for v in selected.values())]
	        for i in range(len(points))
	    ),
	)

	result = {
	    "case": case.case_id,
	    "per_class": per_class,
	    "seed": seed,
	    "coverage": coverage,
	    "error_rate": float(loss.mean()),
	    "scores": summary,
	}
	formats.write_json(f"{out}/summary.json", result)
	click.echo(formats.dumps_json(result), nl=False)


@cli.command(name="lemma", help="Check how the softmax scores approach their large-scale asymptotes")
@click.pass_context
@click.option("--seed", type=int, default=None, help="Sampling seed")
@click.option("--lambdas", metavar="LIST", callback=_float_list, default=None, help="Comma-separated scale factors")
@click.option("--rows", "row_source", type=click.Choice(["mixture", "random"]), default="mixture", help="Which logit rows to sweep")
@click.option("--out", metavar="PATH", required=True, help="Output CSV")
def cmd_lemma(ctx: Any, seed: Optional[int], lambdas: Optional[tuple[float, ...]], row_source: str, out: str):
	Config.load(ctx.meta["config_file"])
	cfg = config().asymptotics
	seed = _seed(seed)

	if row_source == "mixture":
		spec = syn.MixtureSpec.default(config().synthetic.variance)
		sample = syn.sample_per_class(spec, config().synthetic.per_class, seed)
		z = syn.logits_2d(syn.LinearClassifier2D.optimal(spec), sample.points)
	else:
		z = asym.random_gapped_rows(cfg.rows, 5, seed)

	report = asym.convergence_sweep(z, lambdas or cfg.lambdas, cfg.min_gap)
	formats.write_asymptotic_report(out, report)

	msg.log(f"Swept {len(z)} rows over {len(lambdas or cfg.lambdas)} scale factors")
	with msg.Indent():
		for score in (ScoreId.SR_MAX, ScoreId.SR_DOCTOR, ScoreId.SR_ENT):
			taus = [t for t in report.taus(score) if t is not None]
			if taus:
				msg.metric(f"{score} tau", taus[-1])


@cli.command(name="heatmap", help="Evaluate a score on a regular grid over the mixture's plane")
@click.pass_context
@click.option(
    "--score", "score_name", metavar="SCORE", required=True, type=click.Choice([syn.score_name(s) for s in SYNTH_SCORES]),
    help="The score function"
)
@click.option("--grid", metavar="LO,HI,N", callback=_grid, default=None, help="Grid extent and resolution")
@click.option("--out", metavar="PATH", required=True, help="Output CSV")
def cmd_heatmap(ctx: Any, score_name: str, grid: Optional[tuple[float, float, int]], out: str):
	Config.load(ctx.meta["config_file"])
	cfg = config().synthetic

	spec = syn.MixtureSpec.default(cfg.variance)
	score: syn.SyntheticScore = "s_post" if score_name == "s_post" else ScoreId(score_name)

	g = syn.score_grid(syn.LinearClassifier2D.optimal(spec), score, grid or cfg.grid, spec)
	formats.write_grid(out, g)
	msg.log(f"Wrote {g.values.size} grid values to '{out}'")


@cli.command(name="sweep-knn", help="AURC of the KNN score across neighbour ranks")
@click.pass_context
@click.option("--manifest", metavar="MANIFEST", required=True, type=MANIFEST_PATH, help="The dataset manifest")
@click.option("--k", "ks", metavar="LIST", required=True, callback=_int_list, help="Comma-separated neighbour ranks")
@click.option("--splits", type=SPLIT_CHOICE, default="all", help="Which shift types to mix into the evaluation")
@click.option("--seed", type=int, default=None, help="Seed for the calibration draw")
@click.option("--out", metavar="PATH", required=True, help="Output CSV")
def cmd_sweep_knn(ctx: Any, manifest: str, ks: tuple[int, ...], splits: str, seed: Optional[int], out: str):
	es, _ = _load(ctx, manifest)
	cal = draw_calibration(es, _seed(seed), config().scores.calibration_multiplier)

	mask = mix_mask(es, splits)
	if not mask.any():
		msg.error_and_exit(f"No rows in split mix '{splits}'")
	loss = selection.losses(es).values[mask]

	alphas = config().report.alphas
	rows: list[list[Any]] = []
	for k in msg.progress(ks, "Sweeping k", total=len(ks)):
		knn = sc.KnnConfig.create(k, cal)
		s = sc.score_set(es, ScoreId.KNN, sc.ScoreConfigs(knn=knn))
		summary = _rc_summary(selection.rc_curve(s.values[mask], loss), alphas)
		rows.append([k, summary["aurc"], *(summary[selection.alpha_key(a)] for a in alphas)])

	formats.write_csv(out, ["k", "aurc", *(selection.alpha_key(a) for a in alphas)], rows)
	msg.log(f"Wrote {len(rows)} KNN sweep rows to '{out}'")


@cli.command(name="table", help="AURC-alpha of every score on every split mix")
@click.pass_context
@click.option("--manifest", metavar="MANIFEST", required=True, type=MANIFEST_PATH, help="The dataset manifest")
@click.option("--seed", type=int, default=None, help="Seed for the calibration draw")
@click.option("--out", metavar="PATH", required=True, help="Output CSV")
def cmd_table(ctx: Any, manifest: str, seed: Optional[int], out: str):
	es, head = _load(ctx, manifest)
	seed = _seed(seed)
	loss = selection.losses(es).values
	alphas = config().report.alphas

	rows: list[list[Any]] = []
	for score_id in msg.progress(list(ScoreId), "Scoring", total=len(ScoreId)):
		try:
			scores = _score(es, head, score_id, seed)
		except (MissingHead, MissingFeatures, InsufficientCalibrationData, DegenerateSpectrum, ZeroVariance) as e:
			msg.warn2(f"Skipping '{score_id}': {e}")
			continue

		for mix in SPLIT_MIXES:
			mask = mix_mask(es, mix)
			if not mask.any():
				continue
			summary = _rc_summary(selection.rc_curve(scores.values[mask], loss[mask]), alphas)
			rows.append([str(score_id), mix, int(mask.sum()), *(summary[selection.alpha_key(a)] for a in alphas)])

	header = ["score", "splits", "n", *(selection.alpha_key(a) for a in alphas)]
	formats.write_csv(out, header, rows)
	click.echo(formats.format_csv(header, rows), nl=False)


def main() -> int:
	return cli()
