#pragma once

#include "nirsplat/common.hpp"
#include "nirsplat/field.hpp"
#include "nirsplat/geom.hpp"
#include "nirsplat/raster.hpp"

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace nirsplat::optim {

enum class Reduction { mean, sum };

/// Per-pixel L1 of the color difference, averaged over pixels (or summed).
/// `grad`, when given, receives d loss / d rendered (zero where the values agree).
double photometric_loss(const Image& rendered, const Image& observed, Image* grad = nullptr,
                        Reduction reduction = Reduction::mean);

/// Mean over pixels valid in both maps of |P_i / z - Q_i / z_hat|, where z and z_hat are the
/// mean norms of the valid points of each map. Throws std::invalid_argument without valid pixels.
/// `grad` receives d loss / d P (zero at invalid pixels); `per_pixel` the individual distances.
/// Optional `pixel_weights` (one per pixel) turn the mean into (1/m) sum_i w_i |...|.
double pointmap_regression_loss(const geom::PointMap& predicted, const geom::PointMap& target,
                                std::vector<Vec3>* grad = nullptr, std::vector<double>* per_pixel = nullptr,
                                std::span<const double> pixel_weights = {});

/// sum_i O_i L_i - w_conf log O_i. Throws std::invalid_argument on a non-positive confidence.
double confidence_loss(std::span<const double> confidence, std::span<const double> losses, double w_conf,
                       std::vector<double>* grad_confidence = nullptr, std::vector<double>* grad_losses = nullptr);

struct LossWeights {
    double photometric = 1.0;
    double pointmap_reg = 0.1;
    double confidence = 0.05;
    double w_conf = 0.2;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam moments keyed by parameter-group name, plus a shared step counter.
struct OptimState {
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };
    std::map<std::string, Moments> groups;
    long step = 0;

    /// Re-indexes a group after densification: row r of the new tensor takes the moments of
    /// source[r] (stride values per row); rows marked created start from zero.
    void remap(const std::string& name, std::span<const int> source, const std::vector<bool>& created, int stride);
};

struct ParamGroup {
    std::string name;
    std::span<double> values;
    std::span<const double> grads;
    double lr = 0.0;
};

/// One bias-corrected Adam step over all groups. Increments state.step once.
/// Throws std::runtime_error naming the group when a gradient is not finite.
void adam_step(std::span<ParamGroup> groups, OptimState& state, const AdamConfig& cfg = {});

struct LearningRates {
    double position = 1.6e-3;  // multiplied by the scene extent
    double opacity = 0.05;
    double scale = 5e-3;
    double rotation = 1e-3;
    double sh = 2.5e-3;
    double pose = 1e-4;
    double network = 1e-3;
};

struct TrainView {
    geom::Pose pose;
    geom::CameraIntrinsics K;
    Image rgb;
};

struct LossReport {
    double photometric = 0.0;
    double pointmap_reg = 0.0;
    double confidence = 0.0;
    double total = 0.0;
    std::vector<double> per_view;
};

struct JointConfig {
    int iterations = 1000;
    LossWeights weights;
    LearningRates lr;
    AdamConfig adam;
    double scene_extent = 1.0;
    bool optimize_gaussians = true;
    bool optimize_poses = false;
    /// Densification every adc_interval iterations while iteration < adc_stop; 0 disables.
    int adc_interval = 0;
    int adc_stop = 0;
    field::AdcConfig adc;
    Vec3 background = Vec3::Zero();
    Reduction reduction = Reduction::mean;
    double divergence_factor = 10.0;
    /// Called after every iteration with the iteration index and its report.
    std::function<void(int, const LossReport&)> on_iteration;
};

struct JointResult {
    field::GaussianField field;
    std::vector<geom::Pose> poses;
    std::vector<LossReport> history;
};

/// Alternating full passes over all views: render, photometric loss averaged over views,
/// backward, Adam on Gaussian parameters and pose twists. Throws std::runtime_error
/// when the total loss exceeds divergence_factor times its first value.
JointResult joint_optimize(const field::GaussianField& field, const std::vector<TrainView>& views,
                           const JointConfig& cfg);

/// CSV with columns iteration, photometric, pointmap_reg, confidence, total.
void write_loss_csv(const std::string& path, const std::vector<LossReport>& history);

struct FdReport {
    double max_rel_error = 0.0;
    int worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    int checked = 0;
    bool passed = true;
};

/// Central differences of f around x at the listed coordinates (all when empty), compared with
/// `analytic` using |a - n| / max(|a|, |n|, 1e-8).
FdReport finite_diff_check(const std::function<double(std::span<const double>)>& f, std::span<const double> x,
                           std::span<const double> analytic, double h, double tolerance,
                           std::span<const int> coords = {});

struct GradcheckResult {
    std::string name;
    FdReport report;
    double tolerance = 0.0;
};

/// Suites: raster, encode, fuse, losses, all. Throws std::invalid_argument for an unknown suite.
std::vector<GradcheckResult> run_gradcheck(const std::string& suite);

}  // namespace nirsplat::optim
