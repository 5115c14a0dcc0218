import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from lesiondet.core.errors import DataError, InvalidArgumentError
from lesiondet.core.imaging.image import Image
from lesiondet.core.io import txt
from lesiondet.core.io.images import read_f32i, write_f32i, write_mask
from lesiondet.core.utils.config import RunConfig, load_config
from lesiondet.dataset.manifest import read_exams, read_manifest, write_manifest
from lesiondet.dataset.phantom import PhantomSpec, generate_phantom_dataset
from lesiondet.dataset.prepare import prepare_record
from lesiondet.dataset.records import ImageRecord, LesionAnnotation
from lesiondet.dataset.split import SPLITS, TEST, SplitAssignment, split_exams
from lesiondet.detection.candidates import ProbabilityMap, extract_candidates, lesion_points, write_candidates_csv
from lesiondet.detection.froc import (froc_exam_based, froc_image_based, match_image, read_froc_csv, summary_line,
                                      write_froc_csv)
from lesiondet.detection.plotter import plot_froc
from lesiondet.models.unet import infer_full_image, load_model
from lesiondet.scripts import train as training


"""
    cli.py

    Command-line entry point:

        synth       render a phantom dataset and its manifest
        preprocess  write working-grid images, breast and lesion masks
        train       train the u-net, optionally resuming
        infer       write one probability map per image of a split
        froc        extract candidates and write FROC curves, plot and summary
        plot        re-render the FROC plot from a curve CSV

    Exit codes: 0 success, 2 invalid arguments, 3 data errors, 4 I/O errors.
"""

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_ARGUMENT, EXIT_DATA, EXIT_IO = 0, 2, 3, 4
MANIFEST_NAME = 'manifest.jsonl'
INDEX_NAME = 'index.json'
LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, force=True)


def _map_over(fn, items: list, threads: int) -> list:
    """ Applies fn to every item on a thread pool, results in input order. """
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def cmd_synth(n_exams: int, malignant_fraction: float, out_dir: str, config: RunConfig) -> str:
    """ Renders a phantom dataset.

    :return: manifest path
    """
    if n_exams < len(SPLITS):
        raise InvalidArgumentError(f"At least {len(SPLITS)} exams are needed, got {n_exams}.")

    spec = PhantomSpec.from_dict(dataclasses.asdict(config.phantom))
    exams = generate_phantom_dataset(n_exams, malignant_fraction, out_dir, config.seed, spec)

    path = os.path.join(out_dir, MANIFEST_NAME)
    write_manifest(path, [record for exam in exams for record in exam.images])
    logger.info("Wrote %s.", path)
    return path


def cmd_preprocess(manifest: str, out_dir: str, config: RunConfig) -> str:
    """ Writes preprocessed images, breast masks and resampled lesion
    masks, and a manifest pointing at them.

    :return: manifest path
    """
    prep = config.preprocessing
    records = read_manifest(manifest)

    def run(record: ImageRecord) -> ImageRecord:
        img, mask, lesions = prepare_record(record, prep.target_spacing_mm, prep.band_sigmas_mm)

        path = os.path.join(out_dir, 'images', f'{record.image_id}.f32i')
        mask_path = os.path.join(out_dir, 'masks', f'{record.image_id}_breast.pgm')
        write_f32i(path, img)
        write_mask(mask_path, mask.bits)

        written = []
        for lesion in lesions:
            lesion_path = os.path.join(out_dir, 'masks', f'{lesion.id}.pgm')
            write_mask(lesion_path, lesion.load_mask())
            written.append(LesionAnnotation(lesion.id, img.spacing_mm, mask=lesion.mask, mask_path=lesion_path))

        return ImageRecord(record.exam_id, path, record.view, record.laterality, written, record.image_id,
                           img.spacing_mm, preprocessed=True, mask_path=mask_path)

    path = os.path.join(out_dir, MANIFEST_NAME)
    write_manifest(path, _map_over(run, records, config.threads))
    logger.info("Preprocessed %d images into %s.", len(records), out_dir)
    return path


def cmd_train(manifest: str, out_model: str, config: RunConfig, resume: bool = False):
    """ Trains the u-net; see lesiondet.scripts.train. """
    return training.train(read_exams(manifest), config, out_model, resume)


def _split_for(model_path: str, sidecar: dict, exams: list, config: RunConfig) -> SplitAssignment:
    stored = os.path.join(os.path.dirname(os.path.abspath(model_path)), sidecar.get('split_path', ''))

    if sidecar.get('split_path') and os.path.exists(stored):
        return SplitAssignment.load(stored)

    logger.warning("No stored split next to %s; splitting with seed %d.", model_path, config.seed)
    return split_exams(exams, config.seed)


def cmd_infer(model_path: str, manifest: str, out_dir: str, config: RunConfig, split: str = TEST) -> list:
    """ Writes `<image_id>.f32i` probability maps for every image of a
    split (or of all exams) and an index file listing them.

    :return: image ids in manifest order
    """
    model, sidecar = load_model(model_path)
    exams = read_exams(manifest)

    trained = sidecar.get('preprocessing', {})
    prep = config.preprocessing
    if trained and abs(trained['target_spacing_mm'] - prep.target_spacing_mm) > 1e-9:
        raise DataError(f"Model was trained at {trained['target_spacing_mm']} mm spacing, "
                        f"configuration requests {prep.target_spacing_mm} mm.")

    if trained and tuple(trained['band_sigmas_mm']) != tuple(prep.band_sigmas_mm):
        raise DataError(f"Model was trained with band sigmas {tuple(trained['band_sigmas_mm'])} mm, "
                        f"configuration requests {tuple(prep.band_sigmas_mm)} mm.")

    if split != 'all':
        exams = _split_for(model_path, sidecar, exams, config).select(exams, split)

    records = [record for exam in exams for record in exam.images]

    def run(record: ImageRecord) -> str:
        img, _, _ = prepare_record(record, prep.target_spacing_mm, prep.band_sigmas_mm)
        prob_map = infer_full_image(model, img)
        write_f32i(os.path.join(out_dir, f'{record.image_id}.f32i'), Image(prob_map.values, prob_map.spacing_mm))
        return record.image_id

    # The model is shared read-only; eval mode and no_grad make inference free of side effects.
    model.eval()
    image_ids = _map_over(run, records, config.threads)

    txt.write_json(os.path.join(out_dir, INDEX_NAME), {'split': split, 'image_ids': image_ids})
    logger.info("Wrote %d probability maps to %s.", len(image_ids), out_dir)
    return image_ids


def cmd_froc(maps_dir: str, manifest: str, out_prefix: str, config: RunConfig, log_x: bool = False) -> list:
    """ Candidates, both FROC curves, their plot and summary.

    Writes `<prefix>_candidates.csv`, `<prefix>_froc.csv` and
    `<prefix>_froc.svg`.

    :return: [image-based curve, exam-based curve]
    """
    records = {record.image_id: record for record in read_manifest(manifest)}

    index_path = os.path.join(maps_dir, INDEX_NAME)
    image_ids = txt.read_json(index_path)['image_ids'] if os.path.exists(index_path) else sorted(records)

    unknown = [i for i in image_ids if i not in records]
    if unknown:
        raise DataError(f"Maps without manifest entries: {', '.join(unknown)}.")

    missing = [i for i in image_ids if not os.path.exists(os.path.join(maps_dir, f'{i}.f32i'))]
    if missing:
        raise DataError(f"Missing probability maps for: {', '.join(missing)}.")

    cand = config.candidates

    def run(image_id: str):
        img = read_f32i(os.path.join(maps_dir, f'{image_id}.f32i'))
        candidates = extract_candidates(ProbabilityMap(img.pixels, img.spacing_mm), cand.base_threshold,
                                        cand.cluster_radius_mm)
        record = records[image_id]
        match = match_image(candidates, lesion_points(record), config.froc.hit_radius_mm, image_id, record.exam_id)
        return candidates, match

    results = _map_over(run, image_ids, config.threads)
    matches = [match for _, match in results]

    write_candidates_csv(f'{out_prefix}_candidates.csv',
                         {image_id: candidates for image_id, (candidates, _) in zip(image_ids, results)})

    curves = [froc_image_based(matches), froc_exam_based(matches)]
    write_froc_csv(f'{out_prefix}_froc.csv', curves)
    plot_froc(curves, f'{out_prefix}_froc.svg', log_x=log_x)

    for curve in curves:
        line = summary_line(curve, cand.base_threshold)
        logger.info(line)
        print(line)

    return curves


def cmd_plot(froc_csv: str, out: str, log_x: bool = False) -> None:
    plot_froc(read_froc_csv(froc_csv), out, log_x=log_x)
    logger.info("Wrote %s.", out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='lesiondet', description="Soft-tissue lesion candidate detection.")
    parser.add_argument('--seed', type=int, default=None, help="random seed (overrides the configuration)")
    parser.add_argument('--config', default=None, help="JSON run configuration")
    parser.add_argument('--threads', type=int, default=None, help="worker threads for per-image work")
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'],
                        help="logging level (default: INFO)")

    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', help="render a phantom dataset")
    synth.add_argument('--n-exams', type=int, default=60)
    synth.add_argument('--malignant-fraction', type=float, default=0.42)
    synth.add_argument('--out-dir', required=True)

    preprocess = commands.add_parser('preprocess', help="preprocess a dataset onto the working grid")
    preprocess.add_argument('--manifest', required=True)
    preprocess.add_argument('--out-dir', required=True)

    train = commands.add_parser('train', help="train the u-net")
    train.add_argument('--manifest', required=True)
    train.add_argument('--out-model', required=True)
    train.add_argument('--resume', action='store_true', help="continue from <out-model>.last")

    infer = commands.add_parser('infer', help="write probability maps")
    infer.add_argument('--model', required=True)
    infer.add_argument('--manifest', required=True)
    infer.add_argument('--split', default=TEST, choices=list(SPLITS) + ['all'])
    infer.add_argument('--out-dir', required=True)

    froc = commands.add_parser('froc', help="evaluate probability maps")
    froc.add_argument('--maps-dir', required=True)
    froc.add_argument('--manifest', required=True)
    froc.add_argument('--out-prefix', required=True)
    froc.add_argument('--log-x', action='store_true')

    plot = commands.add_parser('plot', help="plot FROC curves from a CSV")
    plot.add_argument('--froc-csv', required=True)
    plot.add_argument('--out', required=True)
    plot.add_argument('--log-x', action='store_true')

    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    overrides = {}

    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.threads is not None:
        overrides['threads'] = args.threads

    return dataclasses.replace(config, **overrides) if overrides else config


def run(args: argparse.Namespace) -> None:
    config = resolve_config(args)

    if args.command == 'synth':
        cmd_synth(args.n_exams, args.malignant_fraction, args.out_dir, config)
    elif args.command == 'preprocess':
        cmd_preprocess(args.manifest, args.out_dir, config)
    elif args.command == 'train':
        cmd_train(args.manifest, args.out_model, config, args.resume)
    elif args.command == 'infer':
        cmd_infer(args.model, args.manifest, args.out_dir, config, args.split)
    elif args.command == 'froc':
        cmd_froc(args.maps_dir, args.manifest, args.out_prefix, config, args.log_x)
    elif args.command == 'plot':
        cmd_plot(args.froc_csv, args.out, args.log_x)


def main(argv: list = None) -> int:
    """ Parses arguments, runs the command and maps failures to exit codes. """
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    try:
        run(args)
    except InvalidArgumentError as exc:
        logger.error("%s", exc)
        return EXIT_ARGUMENT
    except DataError as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    except OSError as exc:
        logger.error("%s", exc)
        return EXIT_IO

    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
