"""Software simulation of a confidential-computing stack for tiled AI accelerators.

The package models a board with a hardware root of trust (measured boot,
attestation, TEE lifecycle), inline AES-256-GCM exchange pipes on the
host-device DMA path, and a multi-party confidential job pipeline that is
verifiable end-to-end against adversarial hosts.
"""

__version__ = "0.1.0"
