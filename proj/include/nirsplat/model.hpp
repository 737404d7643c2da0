#pragma once

#include "nirsplat/encode.hpp"
#include "nirsplat/fuse.hpp"
#include "nirsplat/optim.hpp"

#include <nlohmann/json_fwd.hpp>

#include <functional>
#include <string>
#include <vector>

namespace nirsplat::model {

/// How NIR enters the network: attention (deformable cross-attention), concat (4-channel
/// input to one extractor) or sum (extracted features added).
enum class FusionMode { attention, concat, sum };

FusionMode fusion_from_string(const std::string& s);
std::string to_string(FusionMode m);

struct ModelConfig {
    int channels = 32;
    int heads = 4;
    int points = 4;
    int blocks = 2;
    int ffn_hidden = 64;
    encode::EncoderConfig encoder;  // out_dim is forced to channels
    int decoder_hidden = 64;
    int sh_degree = 1;
    /// Fractions of the scene extent.
    double offset_scale = 0.02;
    double scale_min = 1e-4;
    double scale_max = 0.1;
    FusionMode fusion = FusionMode::attention;
    bool use_text = true;
    int max_tokens = 64;
    std::uint64_t seed = 0;
};

nlohmann::json to_json(const ModelConfig& c);
/// Missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

struct ModelView {
    Image rgb;
    Image nir;
    geom::PointMap pmap;
    geom::Pose pose;
    geom::CameraIntrinsics K;
};

class NirSplatModel {
public:
    NirSplatModel(const ModelConfig& cfg, double scene_extent);

    struct Cache {
        fuse::FeatureExtractor::Cache rgb, nir;
        Image input;  // the image fed to the RGB extractor
        fuse::FeatureMap f_rgb, f_nir, f_nr, f_ntr;
        encode::PeGrid pe;
        fuse::StackCache nr_stack, txt_stack;
        fuse::GaussDecoder::Cache decoder;
    };

    /// One primitive per valid point-map pixel of the view. `text` may be empty when text is disabled.
    fuse::GaussDecoder::Output forward(const ModelView& view, const RowMatrix& text, Cache* cache = nullptr) const;
    /// Accumulates parameter gradients.
    void backward(const RowMatrix& text, const Cache& cache, const fuse::GaussDecoder::PrimitiveGrads& grads);

    nn::ParamList parameters();
    const ModelConfig& config() const { return cfg_; }

private:
    ModelConfig cfg_;
    fuse::FeatureExtractor rgb_net_, nir_net_;
    encode::PositionalEncoder pe_;
    std::vector<fuse::AttentionBlock> nr_blocks_, txt_blocks_;
    fuse::GaussDecoder decoder_;
};

struct NetworkTrainConfig {
    int iterations = 200;
    double lr = 1e-3;
    optim::LossWeights weights;
    optim::AdamConfig adam;
    Vec3 background = Vec3::Zero();
    std::function<void(int, const optim::LossReport&)> on_iteration;
};

/// Decodes every view and concatenates the primitives (view order).
field::GaussianField decode_scene(const NirSplatModel& model, const std::vector<ModelView>& views,
                                  const RowMatrix& text);

/// Trains the network end to end: photometric loss of the merged decoded field rendered into
/// every view, plus point-map regression and confidence terms on the decoded centres.
std::vector<optim::LossReport> train_network(NirSplatModel& model, const std::vector<ModelView>& views,
                                             const RowMatrix& text, const NetworkTrainConfig& cfg);

}  // namespace nirsplat::model
