"""Immutable-block replicated store with chunk-level repair and majority voting."""

from .cluster import CLIENT, DEFAULT_SCOPE, BlockCluster, ReadResult
from .datanode import (CHUNK, PIECE, DataNode, DiskCost, ReadStats, ScrubReport, crc_name, data_name,
                       decode_sidecar, encode_sidecar)
from .namenode import BlockMeta, Journal, NameNode

__all__ = [
    "CLIENT",
    "DEFAULT_SCOPE",
    "BlockCluster",
    "ReadResult",
    "CHUNK",
    "PIECE",
    "DataNode",
    "DiskCost",
    "ReadStats",
    "ScrubReport",
    "crc_name",
    "data_name",
    "decode_sidecar",
    "encode_sidecar",
    "BlockMeta",
    "Journal",
    "NameNode",
]
