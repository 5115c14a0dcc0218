import os
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from lesiondet.core.errors import DataError, InvalidArgumentError, ShapeError
from lesiondet.core.imaging.image import BreastMask, Image
from lesiondet.core.io.images import read_f32i, read_mask
from lesiondet.dataset.manifest import read_exams, read_manifest, write_manifest
from lesiondet.dataset.phantom import PhantomSpec, generate_phantom_dataset, generate_phantom_exam, render_phantom_image
from lesiondet.dataset.prepare import load_training_images, prepare_record
from lesiondet.dataset.records import (MALIGNANT, NORMAL, ExamRecord, ImageRecord, LesionAnnotation, group_exams,
                                       mask_center_of_mass)
from lesiondet.dataset.sampling import (NEGATIVE, POSITIVE, TrainingImage, augment_flip, batches, compose_epoch,
                                        draw_breast_pixel, extract_window, materialize_sample, sample_negative_patch,
                                        sample_positive_patch, stack_batch)
from lesiondet.dataset.split import TEST, TRAIN, VAL, SplitAssignment, split_exams, split_sizes


def make_exam(exam_id: str, malignant: bool) -> ExamRecord:
    lesions = [LesionAnnotation(f'{exam_id}_l0', 0.2, mask_path='unused.pgm', center_of_mass_mm=(1.0, 1.0))]
    image = ImageRecord(exam_id, f'{exam_id}.f32i', 'CC', 'L', lesions if malignant else [])
    return ExamRecord(exam_id, [image])


def make_exams(count: int, malignant_fraction: float) -> list:
    n_malignant = int(round(count * malignant_fraction))
    return [make_exam(f'e{i:04d}', i < n_malignant) for i in range(count)]


def disk(shape: tuple, center: tuple, radius: float) -> np.ndarray:
    rows, cols = np.indices(shape)
    return (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius ** 2


def training_image(image_id: str, shape=(400, 400), lesion_centers=(), exam_label=None) -> TrainingImage:
    pixels = np.random.default_rng(0).random(shape).astype(np.float32)
    img = Image(pixels, 0.2)
    lesions = [LesionAnnotation(f'{image_id}_l{k}', 0.2, mask=disk(shape, c, 10)) for k, c in enumerate(lesion_centers)]
    label = exam_label or (MALIGNANT if lesions else NORMAL)
    return TrainingImage(image_id, img, BreastMask.full(img), lesions, label)


# records and manifest

def test_center_of_mass():
    bits = np.zeros((5, 6), dtype=bool)
    bits[1, 2] = bits[3, 4] = True

    assert mask_center_of_mass(bits, 0.5) == (1.5, 1.0)


def test_image_record_defaults_and_validation():
    record = ImageRecord('e1', 'a.f32i', 'MLO', 'R')

    assert record.image_id == 'e1_R_MLO'
    assert record.is_normal

    with pytest.raises(DataError):
        ImageRecord('e1', 'a.f32i', 'ML', 'R')

    with pytest.raises(DataError):
        ImageRecord('e1', 'a.f32i', 'CC', 'X')


def test_exam_label_is_derived():
    exam = make_exam('e1', malignant=True)
    assert exam.label == MALIGNANT and exam.is_malignant

    with pytest.raises(DataError):
        ExamRecord('e1', exam.images, label=NORMAL)

    with pytest.raises(DataError):
        ExamRecord('e2', [])


def test_group_exams_keeps_order():
    records = [ImageRecord('b', 'x', 'CC', 'L'), ImageRecord('a', 'y', 'CC', 'L'), ImageRecord('b', 'z', 'MLO', 'L')]
    exams = group_exams(records)

    assert [e.exam_id for e in exams] == ['b', 'a']
    assert len(exams[0].images) == 2


def test_manifest_paths_are_relative(tmp_path):
    lesion = LesionAnnotation('les', 0.2, mask_path=str(tmp_path / 'masks' / 'les.pgm'), center_of_mass_mm=(2.0, 3.0))
    record = ImageRecord('e1', str(tmp_path / 'images' / 'a.f32i'), 'CC', 'L', [lesion], spacing_mm=0.2)
    path = str(tmp_path / 'manifest.jsonl')

    write_manifest(path, [record])
    line = (tmp_path / 'manifest.jsonl').read_text()
    back = read_manifest(path)[0]

    assert '"path": "images/a.f32i"' in line.replace(os.sep, '/')
    assert back.path == str(tmp_path / 'images' / 'a.f32i')
    assert back.lesions[0].id == 'les'
    assert back.lesions[0].center_of_mass_mm == (2.0, 3.0)
    assert back.lesions[0].spacing_mm == 0.2


def test_manifest_errors(tmp_path):
    duplicate = tmp_path / 'dup.jsonl'
    duplicate.write_text('{"exam_id": "e", "path": "a", "view": "CC", "laterality": "L"}\n' * 2)

    missing = tmp_path / 'missing.jsonl'
    missing.write_text('{"exam_id": "e", "view": "CC", "laterality": "L"}\n')

    broken = tmp_path / 'broken.jsonl'
    broken.write_text('{"exam_id": \n')

    for path in (duplicate, missing, broken):
        with pytest.raises(DataError):
            read_manifest(str(path))


# split

def test_split_sizes():
    assert split_sizes(10) == (5, 1, 4)
    assert split_sizes(3) == (1, 1, 1)
    assert split_sizes(1000) == (500, 100, 400)


def test_split_needs_three_exams():
    with pytest.raises(InvalidArgumentError):
        split_exams(make_exams(2, 0.5), seed=0)


def test_split_partitions_exams():
    exams = make_exams(37, 0.42)
    split = split_exams(exams, seed=11)

    groups = [set(split.exam_ids(name)) for name in (TRAIN, VAL, TEST)]

    assert sum(len(g) for g in groups) == 37
    assert set.union(*groups) == {e.exam_id for e in exams}
    assert all(not (a & b) for i, a in enumerate(groups) for b in groups[i + 1:])


def test_split_is_deterministic():
    exams = make_exams(50, 0.42)

    assert split_exams(exams, seed=5).mapping == split_exams(exams, seed=5).mapping
    assert split_exams(exams, seed=5).mapping != split_exams(exams, seed=6).mapping


def test_split_is_stratified():
    exams = make_exams(1000, 0.42)
    split = split_exams(exams, seed=0)

    for name in (TRAIN, VAL, TEST):
        selected = split.select(exams, name)
        share = sum(e.is_malignant for e in selected) / len(selected)
        assert abs(share - 0.42) <= 0.05, name


def test_split_save_and_load(tmp_path):
    split = split_exams(make_exams(10, 0.4), seed=1)
    path = str(tmp_path / 'split.json')
    split.save(path)

    assert SplitAssignment.load(path).mapping == split.mapping

    with pytest.raises(DataError):
        SplitAssignment({'e': 'holdout'})


# sampling

def test_extract_window_zero_fills():
    window = extract_window(np.ones((6, 6)), (0, 0), 4)

    assert window.shape == (4, 4)
    np.testing.assert_array_equal(window[2:, 2:], 1.0)
    assert window[:2].sum() == 0 and window[:, :2].sum() == 0


@pytest.mark.parametrize('center', [(200, 200), (5, 5), (395, 3), (0, 399)])
def test_positive_patch_shape_and_target(center):
    image = training_image('img', lesion_centers=[center])
    lesion = image.lesions[0]

    patch, target = sample_positive_patch(image.image, lesion)

    assert patch.shape == (344, 344) and target.shape == (344, 344)
    assert target.sum() > 0
    assert target[172, 172] == 1.0


def test_positive_target_holds_every_lesion_in_window():
    image = training_image('img', lesion_centers=[(200, 200), (200, 260)])

    _, own = sample_positive_patch(image.image, image.lesions[0])
    _, union = sample_positive_patch(image.image, image.lesions[0], lesion_union=image.lesion_union)

    assert union.sum() > own.sum()
    assert union[172, 232] == 1.0


def test_negative_patch_is_empty(rng):
    image = training_image('img')
    patch, target = sample_negative_patch(image.image, image.mask, rng)

    assert patch.shape == (344, 344)
    assert not target.any()

    with pytest.raises(DataError):
        sample_negative_patch(image.image, image.mask, rng, exam_label=MALIGNANT)


def test_negative_centers_are_uniform_in_breast():
    bits = np.zeros((60, 60), dtype=bool)
    bits[10:50, 10:50] = True
    mask = BreastMask(bits)
    rng = np.random.default_rng(42)

    counts = np.zeros((4, 4))
    for _ in range(10000):
        row, col = draw_breast_pixel(mask, rng)
        assert bits[row, col]
        counts[(row - 10) // 10, (col - 10) // 10] += 1

    assert chisquare(counts.ravel()).pvalue > 0.01


def test_compose_epoch_balance():
    sources = [training_image(f'p{i}', shape=(64, 64), lesion_centers=[(30, 30)]) for i in range(100)]
    positives = [(image, image.lesions[0]) for image in sources]
    normals = [training_image('n0', shape=(64, 64)), training_image('n1', shape=(64, 64))]

    epoch = compose_epoch(positives, normals, np.random.default_rng(0))
    kinds = Counter(sample.kind for sample in epoch)

    assert len(epoch) == 200
    assert kinds[POSITIVE] == 100 and kinds[NEGATIVE] == 100

    other = compose_epoch(positives, normals, np.random.default_rng(1))
    assert sorted(s.lesion_id for s in epoch if s.kind == POSITIVE) == \
        sorted(s.lesion_id for s in other if s.kind == POSITIVE)
    assert [s.key() for s in epoch if s.kind == NEGATIVE] != [s.key() for s in other if s.kind == NEGATIVE]


def test_compose_epoch_minimal_and_degenerate():
    positive = training_image('p', shape=(64, 64), lesion_centers=[(30, 30)])
    normal = training_image('n', shape=(64, 64))

    assert len(compose_epoch([(positive, positive.lesions[0])], [normal], np.random.default_rng(0))) == 2

    with pytest.raises(DataError):
        compose_epoch([], [normal], np.random.default_rng(0))

    with pytest.raises(DataError):
        compose_epoch([(positive, positive.lesions[0])], [], np.random.default_rng(0))

    with pytest.raises(DataError):
        compose_epoch([(positive, positive.lesions[0])], [positive], np.random.default_rng(0))


def test_epochs_replay_under_equal_seed():
    positive = training_image('p', shape=(64, 64), lesion_centers=[(30, 30)])
    normal = training_image('n', shape=(64, 64))
    positives = [(positive, positive.lesions[0])] * 5

    first = compose_epoch(positives, [normal], np.random.default_rng([3, 1]))
    second = compose_epoch(positives, [normal], np.random.default_rng([3, 1]))

    assert [s.key() for s in first] == [s.key() for s in second]


def test_materialize_sample():
    positive = training_image('p', shape=(64, 64), lesion_centers=[(30, 30)])
    normal = training_image('n', shape=(64, 64))
    epoch = compose_epoch([(positive, positive.lesions[0])], [normal], np.random.default_rng(0))

    for sample in epoch:
        patch, target = materialize_sample(sample, 32)
        assert patch.shape == target.shape == (32, 32)
        assert target.any() == (sample.kind == POSITIVE)


def test_augment_flip_moves_patch_and_target_together():
    patch = np.arange(64, dtype=np.float32).reshape(8, 8)
    target = (patch % 7 == 0).astype(np.float32)
    seen = set()

    for seed in range(64):
        flipped, flipped_target = augment_flip(patch, target, np.random.default_rng(seed))
        np.testing.assert_array_equal(flipped_target, (flipped % 7 == 0).astype(np.float32))
        seen.add(flipped.tobytes())

    assert len(seen) == 4

    with pytest.raises(ShapeError):
        augment_flip(patch, target[:4], np.random.default_rng(0))


def test_batches_and_stacking():
    assert [len(b) for b in batches(list(range(10)), 4)] == [4, 4, 2]

    with pytest.raises(InvalidArgumentError):
        batches([1], 0)

    pairs = [(np.zeros((8, 8), dtype=np.float32), np.ones((8, 8), dtype=np.float32))] * 3
    x, targets = stack_batch(pairs)

    assert x.shape == (3, 1, 8, 8)
    assert targets.shape == (3, 1, 8, 8)


def test_training_image_checks_lesion_grid():
    img = Image(np.zeros((10, 10)), 0.2)
    lesion = LesionAnnotation('l', 0.2, mask=disk((12, 12), (5, 5), 2))

    with pytest.raises(ShapeError):
        TrainingImage('i', img, BreastMask.full(img), [lesion], MALIGNANT)


# phantom

def test_normal_exam_has_no_lesions(tmp_path, tiny_phantom):
    exam = generate_phantom_exam(np.random.default_rng(0), tiny_phantom, 'n1', str(tmp_path), malignant=False)

    assert exam.label == NORMAL
    assert 1 <= len(exam.images) <= 4
    assert all(image.is_normal for image in exam.images)
    assert all(os.path.exists(image.path) for image in exam.images)


def test_malignant_exam_plants_lesions_in_one_breast(tmp_path, tiny_phantom):
    for seed in range(10):
        exam = generate_phantom_exam(np.random.default_rng(seed), tiny_phantom, f'm{seed}', str(tmp_path), True)
        affected = [image for image in exam.images if not image.is_normal]

        assert exam.label == MALIGNANT
        assert len({image.laterality for image in affected}) == 1
        assert len(affected) == sum(image.laterality == affected[0].laterality for image in exam.images)

        for image in affected:
            assert read_f32i(image.path).spacing_mm == tiny_phantom.spacing_mm
            for lesion in image.lesions:
                np.testing.assert_array_equal(read_mask(lesion.mask_path), lesion.mask)


def test_planted_diameter_matches_mask():
    spec = PhantomSpec(diameter_mm=(20.0, 20.0), aspect=(1.0, 1.0), lesions_per_exam=(1, 1))
    _, _, masks = render_phantom_image(spec, 'L', 1, np.random.default_rng(3))

    rows, cols = np.nonzero(masks[0])
    assert (rows.max() - rows.min() + 1) * spec.spacing_mm == pytest.approx(20.0, abs=2.0)
    assert (cols.max() - cols.min() + 1) * spec.spacing_mm == pytest.approx(20.0, abs=2.0)


def test_lesion_aspect_ratio():
    spec = PhantomSpec(lesions_per_exam=(3, 3))

    for seed in range(5):
        _, support, masks = render_phantom_image(spec, 'R', 3, np.random.default_rng(seed))
        for bits in masks:
            rows, cols = np.nonzero(bits)
            ratio = (rows.max() - rows.min() + 1) / (cols.max() - cols.min() + 1)
            assert 0.7 <= ratio <= 1.4
            assert not np.any(bits & ~support)


def test_lesions_do_not_overlap():
    spec = PhantomSpec(diameter_mm=(10.0, 20.0))
    _, _, masks = render_phantom_image(spec, 'L', 3, np.random.default_rng(8))

    assert len(masks) == 3
    assert np.sum(masks, axis=0).max() == 1


def test_phantom_dataset(tmp_path, tiny_phantom):
    exams = generate_phantom_dataset(100, 0.42, str(tmp_path), seed=4, spec=tiny_phantom)

    assert len(exams) == 100
    assert sum(exam.is_malignant for exam in exams) == 42


def test_phantom_dataset_is_reproducible(tmp_path, tiny_phantom):
    for name in ('a', 'b'):
        exams = generate_phantom_dataset(6, 0.5, str(tmp_path / name), seed=9, spec=tiny_phantom)
        write_manifest(str(tmp_path / name / 'manifest.jsonl'), [r for e in exams for r in e.images])

    assert (tmp_path / 'a' / 'manifest.jsonl').read_bytes() == (tmp_path / 'b' / 'manifest.jsonl').read_bytes()

    for path in (tmp_path / 'a' / 'images').iterdir():
        assert path.read_bytes() == (tmp_path / 'b' / 'images' / path.name).read_bytes()


def test_phantom_spec_validation():
    with pytest.raises(InvalidArgumentError):
        PhantomSpec(diameter_mm=(10.0, 5.0))

    with pytest.raises(InvalidArgumentError):
        PhantomSpec(height=4)


# preparation

def test_prepare_raw_record(tmp_path, tiny_phantom):
    exams = generate_phantom_dataset(4, 0.5, str(tmp_path), seed=2, spec=tiny_phantom)
    write_manifest(str(tmp_path / 'manifest.jsonl'), [r for e in exams for r in e.images])
    exams = read_exams(str(tmp_path / 'manifest.jsonl'))

    record = next(r for e in exams for r in e.images if not r.is_normal)
    img, mask, lesions = prepare_record(record, 1.0, (2.0, 4.0, 8.0))

    assert img.shape == (64, 64)
    assert mask.area_px > 0
    assert lesions[0].mask.shape == img.shape
    assert lesions[0].center_of_mass_mm == pytest.approx(record.lesions[0].center_of_mass_mm)

    images = load_training_images(exams, 1.0, (2.0, 4.0, 8.0), threads=2)
    assert [i.image_id for i in images] == [r.image_id for e in exams for r in e.images]


def test_prepare_checks_preprocessed_spacing(tmp_path, tiny_phantom):
    exams = generate_phantom_dataset(3, 0.0, str(tmp_path), seed=2, spec=tiny_phantom)
    record = exams[0].images[0]
    record.preprocessed = True

    with pytest.raises(DataError, match='expected 0.5 mm'):
        prepare_record(record, 0.5, (2.0, 4.0))
