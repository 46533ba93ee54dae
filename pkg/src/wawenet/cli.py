"""Command-line interface."""

import argparse
import logging
from pathlib import Path
import sys

import numpy as np

from . import analysis, impairment, io, model, trainer
from . import preprocess as pp
from .errors import WaweError

log = logging.getLogger("wawenet")


def _names(text):
    names = tuple(n.strip() for n in text.split(",") if n.strip())
    for n in names:
        if n not in pp.TARGETS:
            raise argparse.ArgumentTypeError(f"unknown target {n!r}; known: {', '.join(pp.TARGETS)}")
    if not names:
        raise argparse.ArgumentTypeError("at least one target is required")
    return names


def _emit(text, out):
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _load_net(path):
    net, header = io.load_weights(path)
    names = header.target_names or tuple(f"target{i}" for i in range(net.config.n_targets))
    return net.eval(), names


def _audio_segments(paths, min_saf):
    for p in paths:
        w = io.wav_read(p)
        for seg in pp.extract_segments(w.samples, w.sample_rate, min_saf, source=str(p)):
            yield seg


def _native(names, est):
    cols = []
    for i, n in enumerate(names):
        spec = pp.TARGETS.get(n)
        cols.append(spec.from_unit(est[:, i]) if spec else est[:, i])
    return np.stack(cols, axis=1)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_init(a):
    cfg = model.ModelConfig(input_channels=a.inputs, n_targets=len(a.targets))
    net = model.build(cfg, seed=a.seed)
    io.save_weights(a.out, net, a.targets)
    print(f"{a.out}: {net.parameter_count()} parameters")


def cmd_segment(a):
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in a.files:
        w = io.wav_read(p)
        try:
            segs = pp.extract_segments(w.samples, w.sample_rate, a.min_saf, source=str(p))
        except WaweError as exc:
            log.warning("%s: %s", p, exc)
            continue
        for seg in segs:
            name = out / f"{Path(p).stem}_{seg.offset:08d}.wav"
            io.wav_write(name, seg.samples)
            entries.append(io.ManifestEntry(name, "clean", a.split, {}))
    if not entries:
        raise WaweError("no input file produced a qualifying segment")
    io.manifest_write(out / "manifest.csv", entries, ())
    print(f"{len(entries)} segments -> {out / 'manifest.csv'}")


def cmd_impair(a):
    man = io.manifest_load(a.manifest)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    conditions = [impairment.parse_condition(c) for c in a.conditions.split(",")]
    clean = [pp.SegmentRecord(io.wav_read(e.path).samples.astype(np.float32), 0.0, 0.0,
                              source=Path(e.path).stem) for e in man.entries]
    records = impairment.make_corpus(clean, conditions, seed=a.seed, target_names=a.targets)
    fractions = tuple(zip(("train", "test", "val"), a.splits))
    impairment.assign_splits(records, fractions, seed=a.seed)
    entries = []
    for k, r in enumerate(records):
        name = out / f"{r.source}_{r.condition.replace(':', '_')}_{k:06d}.wav"
        io.wav_write(name, r.samples)
        entries.append(io.ManifestEntry(name, r.condition, r.split, r.targets))
    io.manifest_write(out / "manifest.csv", entries, a.targets)
    print(f"{len(entries)} impaired segments -> {out / 'manifest.csv'}")


def cmd_train(a):
    man = io.manifest_load(a.manifest)
    missing = [n for n in a.targets if n not in man.target_names]
    if missing:
        raise WaweError(f"manifest lacks target columns: {', '.join(missing)}")
    records = io.load_records(man)
    train = [r for r in records if r.split == "train"]
    val = [r for r in records if r.split == "val"]
    if a.init:
        net, _ = io.load_weights(a.init)
        if net.config.n_targets != len(a.targets):
            net = model.adapt(net, len(a.targets), net.config.input_channels)
    else:
        net = model.build(model.ModelConfig(n_targets=len(a.targets)), seed=a.seed)
    cfg = trainer.FitConfig(epochs=a.epochs, batch=a.batch, seed=a.seed, augment_ipa=a.ipa,
                            lr=a.lr, target_names=a.targets, threads=a.threads)
    header = ["epoch", "lr", "train_mse", "val_rmse"] + [f"val_rho_{n}" for n in a.targets]

    def write_log(state):
        rows = [[e.epoch, e.lr, e.train_mse, e.val_rmse] + list(e.val_rho) for e in state.log]
        if a.log:
            io.write_rows(a.log, header, rows)
        return False

    net, state = trainer.fit(net, train, val, cfg, on_epoch=write_log)
    io.save_weights(a.out, net, a.targets)
    last = state.log[-1]
    print(f"epoch {last.epoch}: val_rmse {io.fmt(last.val_rmse)} -> {a.out}")


def cmd_evaluate(a):
    net, names = _load_net(a.weights)
    if a.manifest:
        man = io.manifest_load(a.manifest)
        recs = [r for r in io.load_records(man) if a.split is None or r.split == a.split]
        if not recs:
            raise WaweError("no records in the requested split")
        est = trainer.predict(net, recs)
        rows = [[r.source, r.condition] + list(v) for r, v in zip(recs, _native(names, est))]
        text = io.write_rows(a.out, ["path", "condition"] + list(names), rows)
        if a.out:
            text = ""
        usable = [i for i, n in enumerate(names) if n in man.target_names]
        if usable and len(recs) >= 2:
            used = [names[i] for i in usable]
            tgt = np.array([[r.targets[n] for n in used] for r in recs])
            rep = trainer.metrics(trainer.to_native(est[:, usable], used), trainer.to_native(tgt, used),
                                  [pp.TARGETS[n] for n in used], [r.condition for r in recs], strict=False)
            mrows = [[n, rep.rho[k], rep.rmse[k], rep.nrmse[k],
                      rep.condition_rho[k], rep.condition_nrmse[k]] for k, n in enumerate(rep.names)]
            text += io.write_rows(None, ["target", "rho", "rmse", "nrmse_pct",
                                         "condition_rho", "condition_nrmse_pct"], mrows)
        _emit(text, "-")
        return
    if not a.files:
        raise WaweError("give audio files or --manifest")
    segs = list(_audio_segments(a.files, a.min_saf))
    est = trainer.predict(net, segs)
    rows = [[s.source, s.offset] + list(v) for s, v in zip(segs, _native(names, est))]
    text = io.write_rows(a.out, ["path", "offset"] + list(names), rows)
    if not a.out:
        _emit(text, "-")


def cmd_features(a):
    net, _ = _load_net(a.weights)
    segs = list(_audio_segments(a.files, a.min_saf))
    x = np.stack([s.samples for s in segs])
    x = np.repeat(x[:, None, :], net.config.input_channels, axis=1)
    lat = net.latent(x)
    rows = [[s.source, s.offset] + list(v) for s, v in zip(segs, lat.astype(np.float64))]
    text = io.write_rows(a.out, ["path", "offset"] + [f"c{i}" for i in range(lat.shape[1])], rows)
    if not a.out:
        _emit(text, "-")


def cmd_dcflow(a):
    net, _ = _load_net(a.weights)
    segs = list(_audio_segments([a.file], a.min_saf))
    if a.segment >= len(segs):
        raise WaweError(f"{a.file} has {len(segs)} segments; index {a.segment} is out of range")
    seg = np.repeat(segs[a.segment].samples[None], net.config.input_channels, axis=0)
    m = analysis.dc_flow(net, seg)
    _write_matrix(a.out, m.values, m.labels)


def _write_matrix(out, matrix, labels):
    if out:
        io.write_plot_data(out, matrix, labels)
    else:
        sys.stdout.write(io.format_plot_data(matrix, labels))


def cmd_filters(a):
    net, _ = _load_net(a.weights)
    c = analysis.filter_census(net)
    fr = c.fractions
    rows = [[k, c.counts[k], fr[k]] for k in analysis.FILTER_CLASSES]
    text = io.write_rows(a.out, ["class", "count", "fraction"], rows)
    if not a.out:
        _emit(text, "-")


def cmd_demo(a):
    r = analysis.two_tone_demo(a.f1, a.f2, a.m)
    prefix = a.out_prefix
    _write_matrix(f"{prefix}_full.txt" if prefix else None,
                  np.stack([r.freqs, r.input, r.hwr, r.separate]),
                  ["freq_hz", "input", "hwr_sum", "hwr_separate"])
    _write_matrix(f"{prefix}_pooled.txt" if prefix else None,
                  np.stack([r.pooled_freqs, r.pooled]), ["freq_hz", "pooled"])
    print(f"intermodulation at {abs(a.f2 - a.f1):g} Hz: {r.intermod_db:.1f} dB above separate rectification",
          file=sys.stderr if not prefix else sys.stdout)
    print(f"alias of {r.alias_tone_hz:g} Hz after pooling by {a.m}: {r.alias_attenuation_db:.2f} dB attenuation",
          file=sys.stderr if not prefix else sys.stdout)


def cmd_fingerprint(a):
    net, _ = _load_net(a.weights)
    man = io.manifest_load(a.manifest)
    recs = io.load_records(man)
    ids, m = analysis.condition_fingerprint(net, analysis.group_by_condition(recs))
    _write_matrix(a.out, m, ids)


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="wawenet", description="Waveform-based speech quality estimation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("init", cmd_init, "write a freshly initialized weight file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--targets", type=_names, default=("SEGSNR",))
    sp.add_argument("--inputs", type=int, choices=(1, 2), default=1)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("segment", cmd_segment, "cut WAV files into level-normalized 3 s segments")
    sp.add_argument("files", nargs="+")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--min-saf", type=float, default=0.5)
    sp.add_argument("--split", choices=io.SPLITS, default="train")

    sp = add("impair", cmd_impair, "cross clean segments with impairment conditions")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--conditions", default=",".join(c.ident for c in impairment.DEFAULT_CONDITIONS))
    sp.add_argument("--targets", type=_names, default=impairment.PROXY_TARGETS)
    sp.add_argument("--splits", type=lambda s: tuple(float(v) for v in s.split(",")),
                    default=(0.5, 0.4, 0.1), help="train,test,val fractions")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("train", cmd_train, "train on the train split, validating on the val split")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True, help="weight file to write")
    sp.add_argument("--log", help="per-epoch CSV log")
    sp.add_argument("--init", help="start from this weight file")
    sp.add_argument("--targets", type=_names, default=("SEGSNR",))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--batch", type=int, default=60)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--ipa", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--threads", type=int, default=1)

    sp = add("evaluate", cmd_evaluate, "estimate targets for audio files or a manifest")
    sp.add_argument("files", nargs="*")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--split", choices=io.SPLITS)
    sp.add_argument("--min-saf", type=float, default=0.5)
    sp.add_argument("--out")

    sp = add("features", cmd_features, "write 96-value latent vectors per segment")
    sp.add_argument("files", nargs="+")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--min-saf", type=float, default=0.5)
    sp.add_argument("--out")

    sp = add("dcflow", cmd_dcflow, "per-stage channel means for one segment")
    sp.add_argument("file")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--segment", type=int, default=0)
    sp.add_argument("--min-saf", type=float, default=0.5)
    sp.add_argument("--out")

    sp = add("filters", cmd_filters, "classify every convolution kernel")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--out")

    sp = add("demo-two-tone", cmd_demo, "spectra showing rectification and pooling effects")
    sp.add_argument("--f1", type=float, default=345.0)
    sp.add_argument("--f2", type=float, default=6789.0)
    sp.add_argument("--m", type=int, choices=(2, 3, 4), default=2)
    sp.add_argument("--out-prefix")

    sp = add("fingerprint", cmd_fingerprint, "mean latent vector per condition")
    sp.add_argument("manifest")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--out")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (WaweError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"wawenet {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
