#pragma once

#include "nirsplat/common.hpp"
#include "nirsplat/field.hpp"
#include "nirsplat/geom.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace nirsplat::scene {

struct SceneView {
    std::string rgb;       // paths relative to the bundle directory
    std::string nir;
    std::string pointmap;
    geom::Pose pose;
    bool train = false;
};

struct SceneBundle {
    std::string dir;
    geom::CameraIntrinsics K;
    std::vector<SceneView> views;
    double extent = 1.0;
    std::uint64_t seed = 0;
    int sh_degree = 1;
    std::string prompt_meta;  // relative paths, empty when absent
    std::string gt_field;
    std::string gt_nir_albedo;

    std::string path(const std::string& rel) const { return dir + "/" + rel; }
    std::vector<int> indices(bool train) const;
};

/// Reads DIR/meta.json and checks that every referenced file exists (io::MissingFile otherwise).
SceneBundle load_scene(const std::string& dir);
void write_manifest(const SceneBundle& bundle);

struct ViewData {
    Image rgb;
    Image nir;
    geom::PointMap pmap;
    geom::Pose pose;
};

ViewData load_view(const SceneBundle& bundle, int index);

/// Point maps as H x W x 5 tensors (x, y, z, confidence, valid).
void write_pointmap(const std::string& path, const geom::PointMap& pm);
geom::PointMap read_pointmap(const std::string& path);

/// Seeded sample of k train indices without replacement; the rest are test. Both sorted.
/// Throws std::invalid_argument unless 1 <= k < n_total.
std::pair<std::vector<int>, std::vector<int>> split_views(int n_total, int k, std::uint64_t seed);

/// Max pairwise distance of camera centres.
double scene_extent(const std::vector<geom::Pose>& poses);

struct SynthConfig {
    int n_gaussians = 10;
    int n_views = 24;
    int width = 64;
    int height = 64;
    std::uint64_t seed = 0;
    int sh_degree = 1;
    /// Train views tagged in the manifest (split_views with the scene seed).
    int split = 3;
    /// RGB gain before clamping; values above 1 saturate bright regions.
    double exposure = 1.0;
    double ring_radius = 2.5;
    double ring_height = 0.8;
};

struct SynthResult {
    SceneBundle bundle;
    field::GaussianField field;
    std::vector<double> nir_albedo;
};

/// Writes a complete bundle into out_dir (created if needed).
SynthResult synth_scene(const SynthConfig& cfg, const std::string& out_dir);

/// Ring cameras looking at the origin.
std::vector<geom::Pose> ring_poses(int n_views, double radius, double height);
geom::CameraIntrinsics default_intrinsics(int width, int height);

/// NIR = clamp(0.35 lum(rgb) + 0.65 albedo) with albedo composited per primitive.
Image synth_nir(const field::GaussianField& f, const std::vector<double>& albedo, const geom::Pose& pose,
                const geom::CameraIntrinsics& K);
/// Point map from composited depth; pixels with coverage below 0.5 are invalid.
geom::PointMap synth_pointmap(const field::GaussianField& f, const geom::Pose& pose, const geom::CameraIntrinsics& K);
/// Ground-truth RGB observation: clamp(exposure * render).
Image synth_rgb(const field::GaussianField& f, const geom::Pose& pose, const geom::CameraIntrinsics& K,
                double exposure);

}  // namespace nirsplat::scene
