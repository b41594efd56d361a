"""Search Engine — search spaces and the weight-sharing super-network.

Sub-package containing:
    search_space  – space builders, ArchCode parsing, enumeration, sampling
    supernet      – mixture super-network, probability sampling, score-based selection
"""
