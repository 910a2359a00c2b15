import numpy as np
import pytest

from gcnmod import background, features, media


def make_synth_specs(num_videos=4, frames=12, height=48, width=64, base_seed=10):
    """Small multi-video setup: two movers and one static distractor each."""
    specs = []
    for i in range(num_videos):
        specs.append(media.SyntheticSpec(
            video_id=f"v{i}", num_frames=frames, height=height, width=width,
            seed=base_seed + i,
            objects=(
                media.MovingObject(start=(5, 4 + i), velocity=(0.0, 1.0),
                                   size=(10, 10), intensity=0.85, texture=0.08),
                media.MovingObject(start=(30, 40), velocity=(-1.0, -1.0),
                                   size=(8, 8), intensity=0.75, texture=0.06),
            ),
            distractors=(
                media.StaticShape(position=(25, 8), size=(8, 12),
                                  intensity=0.15, texture=0.08),
            ),
        ))
    return specs


def build_problem(specs, layout=None, k=10):
    """Run ingestion + features + graph for a list of synthetic specs."""
    from gcnmod import graph, protocol

    layout = layout or features.FeatureLayout()
    bundles, all_instances, gts = [], [], {}
    for spec in specs:
        frames, instances, gt = media.synth_sequence(spec)
        bundles.append((frames, background.median_background(frames, video_id=spec.video_id),
                        instances))
        all_instances.extend(instances)
        for idx, mask in gt.items():
            gts[(spec.video_id, idx)] = mask
    all_instances = media.assign_node_ids(all_instances)
    offset = 0
    renumbered = []
    for frames, bg, instances in bundles:
        renumbered.append((frames, bg, all_instances[offset:offset + len(instances)]))
        offset += len(instances)
    matrix = features.extract_features(renumbered, layout)
    g = graph.build_graph(matrix, k=k)
    labels = protocol.label_nodes(all_instances, gts)
    return {
        "specs": specs,
        "matrix": matrix,
        "graph": g,
        "operator": graph.normalize(g),
        "labels": labels,
        "instances": all_instances,
        "ground_truth": gts,
    }


@pytest.fixture(scope="session")
def small_problem():
    return build_problem(make_synth_specs(num_videos=2, frames=8),
                         layout=features.FeatureLayout(lbp_bins=16, intensity_bins=8),
                         k=5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
