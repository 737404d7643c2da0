#pragma once

#include "nirsplat/io.hpp"
#include "nirsplat/model.hpp"
#include "nirsplat/optim.hpp"
#include "nirsplat/rng.hpp"
#include "nirsplat/scene.hpp"

#include <nlohmann/json_fwd.hpp>

#include <string>
#include <vector>

namespace nirsplat::train {

/// How the field is initialised before per-primitive optimisation.
/// pointmap: one primitive per strided valid pixel; ground_truth: the bundle's field;
/// fused: the trained network's decoded field.
enum class InitMode { pointmap, ground_truth, fused };

struct TrainConfig {
    InitMode init = InitMode::pointmap;
    int iterations = 1000;
    int views = 3;
    std::uint64_t seed = 0;
    int init_stride = 2;
    double init_opacity = 0.3;
    optim::JointConfig joint;  // iterations, scene_extent, callbacks are filled in by train_scene
    model::ModelConfig model;
    int net_iterations = 200;
    double net_lr = 1e-3;
    optim::LossWeights net_weights;
};

/// Keys missing from the JSON keep their defaults; unknown keys throw std::invalid_argument.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);

struct TrainOutput {
    io::Checkpoint checkpoint;
    field::GaussianField field;
    std::vector<geom::Pose> poses;  // one per scene view
    std::vector<int> train_views;
    std::vector<optim::LossReport> history;
};

/// Split uses split_views(n, cfg.views, scene seed); the checkpoint header records it.
TrainOutput train_scene(const scene::SceneBundle& bundle, const TrainConfig& cfg);

/// Field built from strided valid point-map pixels, coloured by the observed RGB.
field::GaussianField pointmap_init(const std::vector<scene::ViewData>& views, const geom::CameraIntrinsics& K,
                                   int stride, double opacity, int sh_degree);

/// Prompt text for the bundle: metadata from prompt_meta.json, indices from the given views.
std::string scene_prompt(const scene::SceneBundle& bundle, const std::vector<scene::ViewData>& views);

struct ViewMetrics {
    int index = 0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct EvalReport {
    std::vector<ViewMetrics> views;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
};

struct EvalOptions {
    int refine_pose_iters = 0;
    /// Quantise renders to 8 bits before scoring (what a PNG round trip yields).
    bool quantize = false;
    double pose_lr = 1e-4;
};

/// Renders `f` at each listed view's pose (optionally refined first) and scores it against the view's RGB.
EvalReport evaluate(const field::GaussianField& f, const scene::SceneBundle& bundle, const std::vector<int>& indices,
                    const EvalOptions& opt = {});

nlohmann::json to_json(const EvalReport& r);

/// Views used for scoring: the complement of the checkpoint's train views, or the manifest tags.
std::vector<int> split_indices(const scene::SceneBundle& bundle, const io::Checkpoint* ck, const std::string& split);

/// Poses stored in a checkpoint header, one per scene view.
std::vector<geom::Pose> checkpoint_poses(const io::Checkpoint& ck);
geom::CameraIntrinsics checkpoint_intrinsics(const io::Checkpoint& ck);

/// Rotates by `angle` radians about a random axis and shifts by `shift` in a random direction.
geom::Pose perturb_pose(const geom::Pose& pose, double angle, double shift, Rng& rng);

}  // namespace nirsplat::train
