"""Semi-supervised consistency training for attention-based sequence-to-sequence ASR.

Speech-chain reconstruction (ASR -> speaker-conditioned TTS, teacher-forced on the
original frames) serves as a weak augmentation for FixMatch-style training, alongside
SpecAugment, with static or dynamic (self-transcribed) pseudo transcripts.
"""

from chainmatch.corpus import (
    EOS,
    CorpusSpec,
    CorpusSplit,
    Utterance,
    Vocabulary,
    build_vocabulary,
    detokenize,
    extract_speaker_embedding,
    generate_corpus,
    tokenize,
)

__all__ = [
    "EOS",
    "CorpusSpec",
    "CorpusSplit",
    "Utterance",
    "Vocabulary",
    "build_vocabulary",
    "detokenize",
    "extract_speaker_embedding",
    "generate_corpus",
    "tokenize",
]

__version__ = "0.1.0"
