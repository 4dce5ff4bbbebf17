#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "anchorseg/geometry.hpp"
#include "anchorseg/scenegen.hpp"
#include "anchorseg/tensor.hpp"

namespace anchorseg {

struct ModelConfig {
    int channels = 64;   // feature width C, shared by all pyramid levels
    int layers = 6;      // decoder depth L
    int n_queries = 16;
    int heads = 4;
    int n_freqs = 8;
    int ffn_mult = 4;
    double near_clip = 1e-6;  // projections with z below this are invalid
    // anchor initialization volume (the region objects occupy, tighter than
    // the room so initial anchors are visible); refinement clamps to 2x this
    Vec3 room_lo = {-1, -1, 0};
    Vec3 room_hi = {1, 1, 1};
    bool disable_geo = false;  // ablation: skip pointmap injection

    std::map<std::string, std::string> to_map() const;
    static ModelConfig from_map(const std::map<std::string, std::string>& m);
};

struct BackboneFeatures {
    Tensor f4, f8, f16, f32;  // S x C x (H/k) x (W/k)
};

struct FeaturePyramid {
    Tensor f32, f16, f8;  // decoder levels
    Tensor fmask;         // S x C x (H/4) x (W/4)
};

struct AnchorState {
    Tensor anchors;  // N_q x 3 world coordinates
    Tensor content;  // N_q x C
};

struct LayerOutput {
    Tensor logits;    // N_q x 2 objectness
    Tensor mask_emb;  // N_q x C (one embedding per query, shared by all views)
    Tensor masks;     // S x N_q x (H/4) x (W/4) logits
    Tensor anchors;   // N_q x 3 after this layer's refinement
};

struct DecoderOutput {
    std::vector<LayerOutput> layers;  // exactly L entries, deep supervision order
};

class Model {
public:
    explicit Model(const ModelConfig& cfg, std::uint64_t seed = 0);

    const ModelConfig& config() const { return cfg_; }
    std::map<std::string, Tensor>& parameters() { return params_; }
    const std::map<std::string, Tensor>& parameters() const { return params_; }
    void zero_grad();

    BackboneFeatures backbone_forward(const Tensor& images) const;
    FeaturePyramid pixel_decoder(const BackboneFeatures& feats, const Tensor& pointmap) const;
    AnchorState anchor_generator(const Tensor& f32) const;
    AnchorState decoder_layer(const AnchorState& state, const FeaturePyramid& pyr,
                              const std::vector<Camera>& cameras, int layer_index) const;
    DecoderOutput decoder_forward(const FeaturePyramid& pyr, const std::vector<Camera>& cameras,
                                  const AnchorState& init) const;
    Tensor mask_head(const Tensor& mask_emb, const Tensor& fmask) const;

    struct ForwardResult {
        FeaturePyramid pyramid;
        DecoderOutput output;
    };
    ForwardResult forward(const SceneSample& sample) const;

    // S x 3 x H x W world-point grid from ground-truth depth (constant input)
    static Tensor pointmap_tensor(const SceneSample& sample);
    static Tensor images_tensor(const SceneSample& sample);

    // cross-attention key/value instrumentation (valid pairs consumed)
    void reset_kv_count() const { kv_pairs_ = 0; }
    std::uint64_t kv_count() const { return kv_pairs_; }

    void save_checkpoint(const std::string& dir,
                         const std::map<std::string, std::string>& extra = {}) const;
    static Model load_checkpoint(const std::string& dir,
                                 std::map<std::string, std::string>* extra = nullptr);

private:
    Tensor param(const std::string& name) const;
    Tensor positional_encoding(const Tensor& anchors) const;
    Tensor clamp_anchors(const Tensor& anchors) const;

    ModelConfig cfg_;
    std::map<std::string, Tensor> params_;
    mutable std::uint64_t kv_pairs_ = 0;
};

}  // namespace anchorseg
