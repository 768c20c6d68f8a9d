import numpy as np
import pytest

from sozpipe import dsp, satae, synthcohort
from sozpipe.connstats import GraphEntry, patient_adjacency, save_graph_store

TINY_SPEC = dict(num_patients=2, num_sites=16, soz_fraction=0.25, seed=7,
                 duration_state_s=8.0, num_ccep_segments=2,
                 ccep_duration_s=6.0, raw_rate_hz=5000.0,
                 coupling_strength=0.8)
TINY_FEAT_LEN = 32
TINY_SAE = dict(input_dim=32, latent_dim=4, encoder_dims=(32, 24, 16, 12, 8),
                epochs=10, attention_placement="E")
TINY_HF = dict(hidden=8, epochs=6, knn_k=3, cheb_order=2, layers=2)


@pytest.fixture(scope="session")
def tiny_workspace(tmp_path_factory):
    """A complete two-patient workspace: cohort, feature store, trained
    autoencoder, latent store, and graph store. Built once per session;
    tests must treat it as read-only."""
    root = tmp_path_factory.mktemp("ws")
    spec = synthcohort.CohortSpec(**TINY_SPEC)
    cohort_dir = root / "cohort"
    synthcohort.save_cohort(synthcohort.iter_patients(spec), str(cohort_dir),
                            spec=spec)

    per_patient = {}
    patients = {}
    for i in range(spec.num_patients):
        patient = synthcohort.load_patient(str(cohort_dir), f"p{i:03d}")
        patients[patient.patient_id] = patient
        per_state = [dsp.state_band_features(patient.states[s],
                                             feat_len=TINY_FEAT_LEN)
                     for s in synthcohort.STATES]
        per_patient[patient.patient_id] = dsp.zscore_sites(
            np.stack(per_state, axis=1))
    features_dir = root / "features"
    dsp.save_feature_store(str(features_dir), per_patient,
                           meta={"feat_len": TINY_FEAT_LEN})

    cfg = satae.SataeConfig(**TINY_SAE)
    model, _ = satae.train_shared(per_patient, cfg)
    sae_path = root / "sae.ckpt"
    satae.save_satae(model, str(sae_path))

    workspace = root / "workspace"
    latents = satae.encode_cohort(model, per_patient)
    dsp.save_feature_store(str(workspace / "latents"), latents,
                           meta={"latent_dim": cfg.latent_dim,
                                 "attention_placement": cfg.attention_placement},
                           axes=("site", "state_band", "latent"))

    entries = [GraphEntry(patient_id=pid,
                          adjacency=patient_adjacency(patients[pid]),
                          labels=patients[pid].labels,
                          communities=patients[pid].communities)
               for pid in sorted(patients)]
    save_graph_store(str(workspace / "graphs"), entries,
                     meta={"rho_tau": 0.3, "alpha": 0.05})

    return {"root": root, "cohort": cohort_dir, "features": features_dir,
            "sae": sae_path, "workspace": workspace, "spec": spec,
            "latent_dim": cfg.latent_dim}
