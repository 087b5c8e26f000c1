import json

import pytest
from hypothesis import given, settings, strategies as st

from sgnet.data import (MOVEMENT_CLASSES, SCALE_CLASSES, Manifest, ManifestError, MovementType,
                        ScaleType, ShotRecord, Split, make_manifest, parse_manifest,
                        serialize_manifest, split_view)
from sgnet.fixtures import make_shot_dataset


def rec(i, split="train", **kw):
    d = dict(shot_id=f"s{i}", media_uri=f"v/{i}.mp4", frame_start=0, frame_end=10, fps=25.0,
             scale="MS", movement="static", split=split)
    d.update(kw)
    return d


def write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))
    return path


def test_taxonomy_sizes_and_order():
    assert [s.value for s in SCALE_CLASSES] == ["LS", "FS", "MS", "CS", "ECS"]
    assert len(MOVEMENT_CLASSES) == 4
    assert ScaleType.parse("ecs") is ScaleType.ECS
    assert MovementType.parse("PUSH") is MovementType.PUSH
    with pytest.raises(ValueError):
        ScaleType.parse("XL")


def test_paper_split_sizes(tmp_path):
    sizes = {"train": 32720, "val": 4610, "test": 9527}
    objs = [{"_header": {"counts": sizes}}]
    i = 0
    for split, n in sizes.items():
        for _ in range(n):
            objs.append(rec(i, split))
            i += 1
    m = parse_manifest(write_lines(tmp_path / "m.jsonl", objs))
    assert len(m) == 46857
    assert m.counts[Split.TRAIN] == 32720 and m.counts[Split.TEST] == 9527


def test_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert len(parse_manifest(p)) == 0


def test_duplicate_names_later_line(tmp_path):
    objs = [rec(i) for i in range(6)] + [rec(2)]
    with pytest.raises(ManifestError) as e:
        parse_manifest(write_lines(tmp_path / "d.jsonl", objs))
    assert e.value.line == 7 and "line 7" in str(e.value) and "line 3" in str(e.value)


@pytest.mark.parametrize("bad", [dict(frame_end=0), dict(frame_start=5, frame_end=5),
                                 dict(scale="XL"), dict(split="dev"), dict(frame_start=-1),
                                 dict(frame_end=3.5)])
def test_rejects_invalid_records(tmp_path, bad):
    with pytest.raises(ManifestError) as e:
        parse_manifest(write_lines(tmp_path / "b.jsonl", [rec(0), rec(1, **bad)]))
    assert e.value.line == 2


def test_malformed_json_line(tmp_path):
    p = tmp_path / "j.jsonl"
    p.write_text(json.dumps(rec(0)) + "\n{not json\n")
    with pytest.raises(ManifestError, match="line 2"):
        parse_manifest(p)


def test_header_count_mismatch(tmp_path):
    objs = [{"_header": {"counts": {"train": 3}}}, rec(0), rec(1)]
    with pytest.raises(ManifestError, match="declares 3"):
        parse_manifest(write_lines(tmp_path / "h.jsonl", objs))


def test_unlabeled_only_in_predict(tmp_path):
    with pytest.raises(ManifestError):
        parse_manifest(write_lines(tmp_path / "u.jsonl", [rec(0, scale=None)]))
    m = parse_manifest(write_lines(tmp_path / "p.jsonl", [rec(0, "predict", scale=None, movement=None)]))
    assert m.records[0].scale_label is None


def test_labels_canonical_on_write_and_unknown_keys_kept(tmp_path):
    p = write_lines(tmp_path / "c.jsonl", [rec(0, scale="cs", movement="Pull", camera="A")])
    m = parse_manifest(p)
    out = serialize_manifest(m, tmp_path / "c2.jsonl")
    line = json.loads(out.read_text().splitlines()[0])
    assert line["scale"] == "CS" and line["movement"] == "pull" and line["camera"] == "A"
    assert parse_manifest(out).records == m.records


def test_split_view():
    a = ShotRecord("A", "a", 0, 3, 25.0, ScaleType.LS, MovementType.STATIC, Split.TRAIN)
    b = ShotRecord("B", "b", 0, 3, 25.0, ScaleType.LS, MovementType.STATIC, Split.TEST)
    assert split_view(make_manifest([a, b]), Split.TRAIN) == [a]
    assert split_view(Manifest(), "val") == []


def test_split_view_on_fixture_matches_line_scan(tmp_path):
    path = make_shot_dataset(tmp_path, 40, seed=0, splits=(0.7, 0.1, 0.2), n_frames=2, size=16)
    # independent count: scan the raw lines
    raw = [json.loads(x) for x in path.read_text().splitlines()]
    n_train = sum(1 for o in raw if o.get("split") == "train")
    m = parse_manifest(path)
    assert n_train == 28 and len(split_view(m, Split.TRAIN)) == 28
    assert sum(m.counts.values()) == len(m) == 40
    ids = [r.shot_id for r in split_view(m, Split.TRAIN)]
    assert ids == [o["shot_id"] for o in raw if o.get("split") == "train"]


label = st.sampled_from(SCALE_CLASSES)
move = st.sampled_from(MOVEMENT_CLASSES)
record_st = st.builds(
    lambda i, start, length, fps, s, mv, sp: ShotRecord(f"id{i}", f"m/{i}.avi", start, start + length,
                                                      fps, s, mv, sp),
    st.integers(0, 10 ** 6), st.integers(0, 1000), st.integers(1, 1000),
    st.floats(1.0, 120.0, allow_nan=False), label, move,
    st.sampled_from([Split.TRAIN, Split.VAL, Split.TEST]))


@settings(max_examples=40, deadline=None)
@given(st.lists(record_st, max_size=12, unique_by=lambda r: r.shot_id), st.booleans())
def test_roundtrip_property(tmp_path_factory, records, header):
    d = tmp_path_factory.mktemp("rt")
    m = make_manifest(records, root=d)
    back = parse_manifest(serialize_manifest(m, d / "m.jsonl", with_header=header))
    assert back.records == m.records
    assert sum(back.counts[s] for s in (Split.TRAIN, Split.VAL, Split.TEST)) == len(back)
