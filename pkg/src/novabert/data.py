"""Interaction-log ingestion, vocabularies, splitting and batch building.

File formats (UTF-8 TSV with a header row):

* interactions: ``user_id  item_id  timestamp`` followed by one column per
  behavior feature declared in the schema.
* items: ``item_id`` followed by one column per item feature; multi-valued
  fields use ``|`` separators.
* schema: INI-style, one section per feature with ``kind`` (item|behavior)
  and ``encoding`` (categorical|bucketed|multi); bucketed features list
  their ``buckets`` edges as comma-separated numbers.

Index conventions: item ID 0 is padding, IDs 1..m are items, m+1 is the
mask token. Every feature reserves index 0 for padding and 1 for UNK.
Position is implicit behavior context (index = 1-based position in the
window) and never appears in the schema file.
"""

from __future__ import annotations

import bisect
import configparser
from dataclasses import dataclass, field

import numpy as np

PAD = 0
UNK = 1

MIN_SEQUENCE_LEN = 5  # shorter histories are discarded (cold-start filter)


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

@dataclass
class FeatureSpec:
    name: str
    kind: str                      # "item" | "behavior"
    encoding: str                  # "categorical" | "bucketed" | "multi"
    buckets: list[float] | None = None
    vocab: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("item", "behavior"):
            raise DataError(f"feature {self.name}: bad kind {self.kind!r}")
        if self.encoding not in ("categorical", "bucketed", "multi"):
            raise DataError(f"feature {self.name}: bad encoding {self.encoding!r}")
        if self.encoding == "bucketed" and not self.buckets:
            raise DataError(f"feature {self.name}: bucketed encoding needs buckets")

    @property
    def vocab_size(self):
        """Embedding rows needed: pad + UNK + value indices."""
        if self.encoding == "bucketed":
            return 2 + len(self.buckets) + 1
        return 2 + len(self.vocab)

    def encode(self, raw):
        """Map one raw string value to its index (UNK when unseen)."""
        if self.encoding == "bucketed":
            try:
                x = float(raw)
            except ValueError:
                return UNK
            return 2 + bisect.bisect_right(self.buckets, x)
        return self.vocab.get(raw, UNK)

    def encode_multi(self, raw):
        """Encode a |-separated multi-valued field to a list of indices."""
        vals = [v for v in raw.split("|") if v]
        if not vals:
            return [UNK]
        return [self.vocab.get(v, UNK) for v in vals]

    def build_vocab(self, values):
        self.vocab = {v: i + 2 for i, v in enumerate(sorted(set(values)))}


@dataclass
class SideInfoSchema:
    features: list[FeatureSpec]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(names) != len(set(names)):
            raise DataError("duplicate feature names in schema")

    def item_features(self):
        return [f for f in self.features if f.kind == "item"]

    def behavior_features(self):
        return [f for f in self.features if f.kind == "behavior"]

    def get(self, name):
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)


def load_schema(path):
    cp = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    feats = []
    for section in cp.sections():
        kind = cp.get(section, "kind")
        encoding = cp.get(section, "encoding")
        buckets = None
        if cp.has_option(section, "buckets"):
            buckets = sorted(float(x) for x in cp.get(section, "buckets").split(","))
        feats.append(FeatureSpec(section, kind, encoding, buckets))
    return SideInfoSchema(feats)


def save_schema(schema, path):
    cp = configparser.ConfigParser()
    for f in schema.features:
        cp[f.name] = {"kind": f.kind, "encoding": f.encoding}
        if f.buckets:
            cp[f.name]["buckets"] = ",".join(repr(b) for b in f.buckets)
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


# ---------------------------------------------------------------------------
# catalog and sequences
# ---------------------------------------------------------------------------

@dataclass
class ItemCatalog:
    """Static item vocabulary. Internal IDs run 1..m; 0 pad, m+1 mask."""
    raw_ids: list[str]                       # raw_ids[i] is item i+1
    id_map: dict[str, int]                   # raw -> internal
    features: dict[str, list]                # name -> per-item encoded values
    raw_features: dict[str, list[str]]       # name -> per-item raw strings

    @property
    def m(self):
        return len(self.raw_ids)

    @property
    def mask_token(self):
        return self.m + 1

    def feature_column(self, name):
        """Encoded values indexed by internal ID (index 0 unused)."""
        return self.features[name]


@dataclass
class InteractionSequence:
    user: str
    items: list[int]                          # internal IDs, chronological
    timestamps: list[int]
    behavior: dict[str, list]                 # name -> encoded per interaction
    raw_behavior: dict[str, list[str]]

    def __len__(self):
        return len(self.items)


def _split_tsv_line(line, n_cols, path, lineno):
    parts = line.rstrip("\n").split("\t")
    if len(parts) != n_cols:
        raise DataError(
            f"{path}:{lineno}: expected {n_cols} columns, got {len(parts)}")
    return parts


def load_items(path, schema):
    item_feats = schema.item_features()
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        expect = ["item_id"] + [f.name for f in item_feats]
        if header != expect:
            raise DataError(f"{path}:1: header {header} does not match schema "
                            f"(expected {expect})")
        raw_ids, raw_cols = [], {f.name: [] for f in item_feats}
        seen = set()
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = _split_tsv_line(line, len(expect), path, lineno)
            if parts[0] in seen:
                raise DataError(f"{path}:{lineno}: duplicate item_id {parts[0]!r}")
            seen.add(parts[0])
            raw_ids.append(parts[0])
            for f, val in zip(item_feats, parts[1:]):
                raw_cols[f.name].append(val)

    for f in item_feats:
        # already-frozen vocabularies (e.g. from a checkpoint) are kept
        if f.vocab:
            continue
        if f.encoding == "categorical":
            f.build_vocab(raw_cols[f.name])
        elif f.encoding == "multi":
            vals = []
            for raw in raw_cols[f.name]:
                vals.extend(v for v in raw.split("|") if v)
            f.build_vocab(vals)

    features = {}
    for f in item_feats:
        if f.encoding == "multi":
            col = [None] + [f.encode_multi(v) for v in raw_cols[f.name]]
        else:
            col = [None] + [f.encode(v) for v in raw_cols[f.name]]
        features[f.name] = col

    id_map = {raw: i + 1 for i, raw in enumerate(raw_ids)}
    raw_features = {name: col for name, col in raw_cols.items()}
    return ItemCatalog(raw_ids, id_map, features, raw_features)


def load_interactions(path, schema, catalog):
    """Parse the interaction log into per-user chronological sequences.

    Records are stably sorted by timestamp inside each user; users with
    fewer than MIN_SEQUENCE_LEN interactions are dropped. Behavior-feature
    vocabularies are frozen here.
    """
    beh_feats = schema.behavior_features()
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        expect = ["user_id", "item_id", "timestamp"] + [f.name for f in beh_feats]
        if header != expect:
            raise DataError(f"{path}:1: header {header} does not match schema "
                            f"(expected {expect})")
        per_user = {}
        order = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = _split_tsv_line(line, len(expect), path, lineno)
            user, raw_item, raw_ts = parts[0], parts[1], parts[2]
            if raw_item not in catalog.id_map:
                raise DataError(f"{path}:{lineno}: unknown item {raw_item!r}")
            try:
                ts = int(raw_ts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {raw_ts!r}") from None
            if user not in per_user:
                per_user[user] = []
                order.append(user)
            per_user[user].append((ts, catalog.id_map[raw_item], parts[3:]))

    # cold-start filter first so vocabularies only reflect retained users
    kept = [(u, sorted(per_user[u], key=lambda r: r[0])) for u in order
            if len(per_user[u]) >= MIN_SEQUENCE_LEN]

    for i, f in enumerate(beh_feats):
        # already-frozen vocabularies (e.g. from a checkpoint) are kept
        if f.encoding in ("categorical", "multi") and not f.vocab:
            vals = []
            for _, recs in kept:
                for _, _, raw in recs:
                    if f.encoding == "multi":
                        vals.extend(v for v in raw[i].split("|") if v)
                    else:
                        vals.append(raw[i])
            f.build_vocab(vals)

    sequences = []
    for user, recs in kept:
        items = [r[1] for r in recs]
        timestamps = [r[0] for r in recs]
        behavior, raw_behavior = {}, {}
        for i, f in enumerate(beh_feats):
            raws = [r[2][i] for r in recs]
            raw_behavior[f.name] = raws
            if f.encoding == "multi":
                behavior[f.name] = [f.encode_multi(v) for v in raws]
            else:
                behavior[f.name] = [f.encode(v) for v in raws]
        sequences.append(InteractionSequence(user, items, timestamps,
                                             behavior, raw_behavior))
    return sequences


def load_dataset(interactions_path, items_path, schema):
    catalog = load_items(items_path, schema)
    sequences = load_interactions(interactions_path, schema, catalog)
    return catalog, sequences


def write_items(catalog, schema, path):
    item_feats = schema.item_features()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(["item_id"] + [f.name for f in item_feats]) + "\n")
        for i, raw in enumerate(catalog.raw_ids):
            row = [raw] + [catalog.raw_features[f.name][i] for f in item_feats]
            fh.write("\t".join(row) + "\n")


def write_interactions(sequences, schema, catalog, path):
    beh_feats = schema.behavior_features()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(["user_id", "item_id", "timestamp"]
                           + [f.name for f in beh_feats]) + "\n")
        for seq in sequences:
            for j in range(len(seq)):
                row = [seq.user, catalog.raw_ids[seq.items[j] - 1],
                       str(seq.timestamps[j])]
                row += [seq.raw_behavior[f.name][j] for f in beh_feats]
                fh.write("\t".join(row) + "\n")


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------

@dataclass
class EvalPair:
    items: list[int]                # prefix, chronological
    behavior: dict[str, list]       # aligned with items
    target: int                     # ground-truth next item (internal ID)


@dataclass
class TrainSequence:
    items: list[int]
    behavior: dict[str, list]


@dataclass
class SplitDataset:
    train: list[TrainSequence]
    validation: list[EvalPair]
    test: list[EvalPair]


def leave_one_out_split(sequences):
    """Per user: last item -> test, second-to-last -> validation, rest train."""
    train, validation, test = [], [], []
    for seq in sequences:
        if len(seq) < MIN_SEQUENCE_LEN:
            raise DataError(f"user {seq.user}: sequence shorter than "
                            f"{MIN_SEQUENCE_LEN} after filtering")
        n = len(seq)

        def cut(k):
            return {name: vals[:k] for name, vals in seq.behavior.items()}

        train.append(TrainSequence(seq.items[:n - 2], cut(n - 2)))
        validation.append(EvalPair(seq.items[:n - 2], cut(n - 2), seq.items[n - 2]))
        test.append(EvalPair(seq.items[:n - 1], cut(n - 1), seq.items[n - 1]))
    return SplitDataset(train, validation, test)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    items: np.ndarray               # [B, L] int64, 0 = pad
    positions: np.ndarray           # [B, L] int64, 1-based, 0 = pad
    features: dict[str, np.ndarray]  # [B, L] or [B, L, K] (multi, 0-padded)
    mask_pos: np.ndarray            # [B, L] bool, True where item was masked
    labels: np.ndarray              # [B, L] int64, 0 = ignore

    @property
    def pad_mask(self):
        """True at real (non-pad) positions."""
        return self.items != PAD


def _window(values, L):
    return values[-L:] if len(values) > L else values


def _feature_arrays(schema, catalog, rows, L):
    """rows: list of (item_window, behavior_window dict, masked bool list)."""
    B = len(rows)
    out = {}
    for f in schema.features:
        multi = f.encoding == "multi"
        if multi:
            kmax = 1
            for items, beh, masked in rows:
                if f.kind == "behavior":
                    col = beh[f.name]
                else:
                    col = [[UNK] if mk else catalog.features[f.name][it]
                           for it, mk in zip(items, masked)]
                for v in col:
                    if isinstance(v, list):
                        kmax = max(kmax, len(v))
            arr = np.zeros((B, L, kmax), dtype=np.int64)
        else:
            arr = np.zeros((B, L), dtype=np.int64)
        for b, (items, beh, masked) in enumerate(rows):
            n = len(items)
            for j in range(n):
                pos = L - n + j
                if f.kind == "item":
                    # masked positions lose item-related features
                    val = UNK if masked[j] else catalog.features[f.name][items[j]]
                    if masked[j] and multi:
                        val = [UNK]
                else:
                    val = beh[f.name][j]
                if multi:
                    vals = val if isinstance(val, list) else [val]
                    arr[b, pos, :len(vals)] = vals
                else:
                    arr[b, pos] = val
        out[f.name] = arr
    return out


def make_masked_batch(train_seqs, schema, catalog, mask_prob, rng, L):
    """Cloze batch: each non-pad position masked independently with
    probability mask_prob; sequences with zero masks are resampled.
    Behavior features (and position) survive masking; item-related features
    at masked positions are replaced by UNK."""
    if L < 1:
        raise DataError(f"sequence length must be >= 1, got {L}")
    if not 0 < mask_prob <= 1:
        raise DataError(f"mask_prob must be in (0, 1], got {mask_prob}")
    B = len(train_seqs)
    items = np.zeros((B, L), dtype=np.int64)
    positions = np.zeros((B, L), dtype=np.int64)
    labels = np.zeros((B, L), dtype=np.int64)
    mask_pos = np.zeros((B, L), dtype=bool)
    rows = []
    for b, seq in enumerate(train_seqs):
        w_items = _window(seq.items, L)
        n = len(w_items)
        off = L - n
        while True:
            m = rng.random(n) < mask_prob
            if m.any():
                break
        for j in range(n):
            positions[b, off + j] = j + 1
            if m[j]:
                items[b, off + j] = catalog.mask_token
                labels[b, off + j] = w_items[j]
                mask_pos[b, off + j] = True
            else:
                items[b, off + j] = w_items[j]
        beh = {name: _window(vals, L) for name, vals in seq.behavior.items()}
        rows.append((w_items, beh, list(m)))
    features = _feature_arrays(schema, catalog, rows, L)
    return Batch(items, positions, features, mask_pos, labels)


def make_eval_batch(pairs, schema, catalog, L):
    """Right-aligned prefix plus one mask token at the final position.

    The mask position carries its true position index; every other behavior
    feature there is UNK (the future interaction's context is unknown).
    Prefixes longer than L-1 keep their most recent L-1 items."""
    B = len(pairs)
    items = np.zeros((B, L), dtype=np.int64)
    positions = np.zeros((B, L), dtype=np.int64)
    labels = np.zeros((B, L), dtype=np.int64)
    mask_pos = np.zeros((B, L), dtype=bool)
    rows = []
    for b, pair in enumerate(pairs):
        if not pair.items:
            raise DataError("empty prefix in evaluation pair")
        prefix = _window(pair.items, L - 1)
        n = len(prefix)
        w_items = prefix + [catalog.mask_token]
        off = L - (n + 1)
        for j in range(n + 1):
            positions[b, off + j] = j + 1
        items[b, off:off + n] = prefix
        items[b, L - 1] = catalog.mask_token
        labels[b, L - 1] = pair.target
        mask_pos[b, L - 1] = True
        beh = {}
        for f in schema.behavior_features():
            col = _window(pair.behavior[f.name], L - 1)
            unk = [UNK] if f.encoding == "multi" else UNK
            beh[f.name] = list(col) + [unk]
        masked = [False] * n + [True]
        rows.append((w_items, beh, masked))
    features = _feature_arrays(schema, catalog, rows, L)
    return Batch(items, positions, features, mask_pos, labels)
