from .env import (
    BODY_CONTACTS,
    FOOT_CONTACTS,
    N_CONTACT,
    N_GEN,
    N_JOINTS,
    OBS_DIM,
    POSTURES,
    PRIV_DIM,
    BipedSim,
    DomainRandSample,
    action_to_target,
    build_observation,
    gravity_in_base,
    pd_torque,
    sample_domain_randomization,
)
from .terrain import (
    TERRAIN_KINDS,
    Terrain,
    TerrainBatch,
    export_terrain,
    generate_terrain,
    import_terrain,
)

__all__ = [
    "BipedSim", "DomainRandSample", "Terrain", "TerrainBatch",
    "action_to_target", "build_observation", "pd_torque", "gravity_in_base",
    "sample_domain_randomization", "generate_terrain", "export_terrain",
    "import_terrain", "TERRAIN_KINDS", "N_JOINTS", "N_GEN", "OBS_DIM",
    "PRIV_DIM", "N_CONTACT", "FOOT_CONTACTS", "BODY_CONTACTS", "POSTURES",
]
