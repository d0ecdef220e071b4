"""
slicecrack settings.

Defaults can be overridden through the environment, the same way the
deployment settings read SECRET_KEY and DEBUG.
"""

import os

LOG_LEVEL = os.environ.get('SLICECRACK_LOG_LEVEL', 'WARNING').upper()

OUTPUT_DIR = os.environ.get('SLICECRACK_OUTPUT_DIR', 'output')

# Latency model (cycles)
SLICECRACK_DEFAULT_L_LLC = float(os.environ.get('SLICECRACK_L_LLC', '40'))
SLICECRACK_DEFAULT_L_MEMORY = float(os.environ.get('SLICECRACK_L_MEMORY', '200'))

# Trace ticks: fills are short, write-backs long
READ_FILL_TICKS = 15
WRITE_BACK_TICKS = 600

# Idle loop bound of the pointer-chase program ("while (k++ < 1000)")
SLICECRACK_DEFAULT_IDLE_GAP = 1000

# Write events pair with the nearest read at most this many events away
SLICECRACK_DEFAULT_PAIR_GAP = 2

# A conflict edge is seen at most 1/ratio as often as the edges next to it
SLICECRACK_CONFLICT_SUPPORT_RATIO = 2

SLICECRACK_DEFAULT_PROBE_REPEATS = 15
SLICECRACK_DEFAULT_LAPS = 4
SLICECRACK_DEFAULT_PAGE_SIZE = 4096

# 64B .. 256MB
SLICECRACK_DEFAULT_STRIDES = [64 << i for i in range(23)]

# Sample size for the recovered-vs-planted equivalence check
SLICECRACK_DEFAULT_EQUIVALENCE_SAMPLE = 10000

# Two-thread knee reported by the original hardware measurement. Only used
# for the discrepancy log; the occupancy model decides the expected knee.
PUBLISHED_TWO_THREAD_KNEE = 18

# Tables cover bits below this; higher bits are flagged in reports
PROBED_ADDRESS_BITS = 30
