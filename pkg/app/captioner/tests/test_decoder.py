import numpy as np
import pytest
from django.test import SimpleTestCase

from autograd.tensor import ShapeError, Tensor
from captioner.backbone import FeatureMap
from captioner.decoder import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    SPECIALS,
    UNK_ID,
    CaptionDecoder,
    DecoderConfig,
    Vocabulary,
    build_vocabulary,
    decoder_forward,
    detokenize,
    greedy_decode,
    tokenize,
)
from captioner.errors import ConfigError, DataError

from .helpers import tiny_decoder

# four content tokens + four specials
VOCAB = build_vocabulary(["a b c d", "a b c", "a b", "a"])


def _memory(batch=2, positions=4, seed=0):
    return FeatureMap(Tensor(np.random.default_rng(seed).standard_normal((batch, positions, 16))))


def _decoder(max_len=24, seed=0):
    return CaptionDecoder(tiny_decoder(max_len), len(VOCAB), np.random.default_rng(seed))


class TokenizerTests(SimpleTestCase):
    def test_lowercases_and_splits_punctuation(self):
        self.assertEqual(tokenize("A red box, Nearer!"), ["a", "red", "box", ",", "nearer", "!"])

    def test_detokenize_attaches_punctuation(self):
        self.assertEqual(detokenize(["a", "box", ",", "nearer", "."]), "a box, nearer.")
        self.assertEqual(detokenize([]), "")


class VocabularyTests(SimpleTestCase):
    def test_specials_come_first(self):
        self.assertEqual(tuple(VOCAB.tokens[:4]), SPECIALS)
        self.assertEqual(len(VOCAB), 8)

    def test_ordered_by_frequency_then_token(self):
        self.assertEqual(VOCAB.content_tokens, ["a", "b", "c", "d"])
        tied = build_vocabulary(["z y", "y z x"])
        self.assertEqual(tied.content_tokens, ["y", "z", "x"])

    def test_min_count_drops_rare_tokens(self):
        self.assertEqual(build_vocabulary(["a b", "a"], min_count=2).content_tokens, ["a"])

    def test_empty_corpus(self):
        with self.assertRaises(DataError):
            build_vocabulary([])
        with self.assertRaises(DataError):
            build_vocabulary(["a"], min_count=2)

    def test_encode_maps_unknown_tokens(self):
        self.assertEqual(VOCAB.encode("A b zebra"), [VOCAB.id_of("a"), VOCAB.id_of("b"), UNK_ID])

    def test_decode_stops_at_eos_and_skips_padding(self):
        a, b = VOCAB.id_of("a"), VOCAB.id_of("b")
        self.assertEqual(VOCAB.decode([BOS_ID, a, PAD_ID, b, EOS_ID, a]), ["a", "b"])

    def test_rejects_missing_specials(self):
        with self.assertRaises(DataError):
            Vocabulary(["a", "b"])

    def test_rejects_duplicates(self):
        with self.assertRaises(DataError):
            Vocabulary(list(SPECIALS) + ["a", "a"])


def test_vocabulary_file_round_trip(tmp_path):
    VOCAB.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt") == VOCAB


def test_missing_vocabulary_file(tmp_path):
    with pytest.raises(DataError):
        Vocabulary.load(tmp_path / "absent.txt")


class DecoderTests(SimpleTestCase):
    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            DecoderConfig(layers=0)
        with self.assertRaises(ConfigError):
            DecoderConfig(d_model=10, heads=4)

    def test_logits_shape(self):
        tokens = np.array([[BOS_ID, 4, 5], [BOS_ID, 6, PAD_ID]])
        logits = decoder_forward(tokens, _memory(), _decoder())
        self.assertEqual(logits.shape, (2, 3, len(VOCAB)))

    def test_causality(self):
        """Changing a later token leaves the logits of earlier positions untouched."""
        decoder = _decoder()
        memory = _memory()
        tokens = np.array([[BOS_ID, 4, 5, 6, 7]] * 2)
        changed = tokens.copy()
        changed[:, 3:] = [[7, 4], [5, 5]]
        before = decoder(tokens, memory).data
        after = decoder(changed, memory).data
        np.testing.assert_allclose(after[:, :3], before[:, :3], rtol=1e-5, atol=1e-6)
        self.assertFalse(np.allclose(after[:, 3:], before[:, 3:]))

    def test_zeroed_cross_attention_ignores_the_image(self):
        decoder = _decoder()
        for layer in decoder.layers:
            layer.cross_attention.output.weight.data[...] = 0.0
            layer.cross_attention.output.bias.data[...] = 0.0
        tokens = np.array([[BOS_ID, 4, 5]])
        first = decoder(tokens, _memory(batch=1, seed=1)).data
        second = decoder(tokens, _memory(batch=1, seed=2)).data
        np.testing.assert_allclose(first, second, rtol=1e-6)

    def test_sequence_longer_than_max_len(self):
        with self.assertRaises(ShapeError):
            _decoder(max_len=2)(np.array([[BOS_ID, 4, 5]]), _memory(batch=1))

    def test_token_id_out_of_range(self):
        with self.assertRaises(ShapeError):
            _decoder()(np.array([[BOS_ID, len(VOCAB)]]), _memory(batch=1))

    def test_width_mismatch_with_encoder(self):
        memory = FeatureMap(Tensor(np.zeros((1, 4, 8))))
        with self.assertRaises(ShapeError):
            _decoder()(np.array([[BOS_ID]]), memory)


class GreedyDecodeTests(SimpleTestCase):
    def test_budget_of_one_gives_empty_captions(self):
        """The budget counts <bos>, so max_len=1 leaves room for nothing else."""
        sequences = greedy_decode(_memory(), _decoder(), VOCAB, max_len=1)
        self.assertEqual([s.tokens for s in sequences], [[], []])

    def test_lengths_respect_budget(self):
        for sequence in greedy_decode(_memory(), _decoder(), VOCAB, max_len=5):
            self.assertLessEqual(len(sequence.ids), 4)

    def test_forced_eos_stops_immediately(self):
        decoder = _decoder()
        decoder.output.bias.data[...] = -1e3
        decoder.output.bias.data[EOS_ID] = 1e3
        sequences = greedy_decode(_memory(), decoder, VOCAB)
        self.assertEqual([s.text for s in sequences], ["", ""])

    def test_forced_token_repeats_until_budget(self):
        decoder = _decoder(max_len=6)
        decoder.output.bias.data[...] = -1e3
        decoder.output.bias.data[VOCAB.id_of("c")] = 1e3
        (sequence,) = greedy_decode(_memory(batch=1), decoder, VOCAB)
        self.assertEqual(sequence.text, "c c c c c")

    def test_decoding_is_deterministic_and_records_nothing(self):
        decoder = _decoder()
        first = [s.ids for s in greedy_decode(_memory(), decoder, VOCAB, max_len=6)]
        second = [s.ids for s in greedy_decode(_memory(), decoder, VOCAB, max_len=6)]
        self.assertEqual(first, second)
        self.assertTrue(all(p.grad is None for p in decoder.parameters()))
