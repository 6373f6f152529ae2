from flavars.datapipe.grounding import (
    ClientConfig,
    MockTransport,
    TransportError,
    build_grounding_request,
    caption_ground_batch,
    parse_grounded_response,
)
from flavars.datapipe.records import (
    Dataset,
    DatasetManifest,
    GroundedCaption,
    Grounding,
    SampleRecord,
    load_dataset,
    write_dataset,
)
from flavars.datapipe.selection import SplitSpec, filter_top_fraction, generate_splits
from flavars.datapipe.vocab import Vocabulary, build_vocab, tokenize

__all__ = [
    "ClientConfig",
    "Dataset",
    "DatasetManifest",
    "GroundedCaption",
    "Grounding",
    "MockTransport",
    "SampleRecord",
    "SplitSpec",
    "TransportError",
    "Vocabulary",
    "build_grounding_request",
    "build_vocab",
    "caption_ground_batch",
    "filter_top_fraction",
    "generate_splits",
    "load_dataset",
    "parse_grounded_response",
    "tokenize",
    "write_dataset",
]
