#pragma once

#include <memory>
#include <set>
#include <string>
#include <vector>

#include "idg/nn.hpp"
#include "idg/optimizer.hpp"

namespace idg {

/// EDM preconditioning coefficients for one noise level.
struct EdmCoeffs {
    double c_skip;
    double c_out;
    double c_in;
    double c_noise;
    double sigma;
    double sigma_data;
};

/// c_skip = s^2/(s^2+o^2), c_out = o*s/sqrt(o^2+s^2), c_in = 1/sqrt(o^2+s^2),
/// c_noise = ln(o)/4, with o the noise level and s the data scale.
EdmCoeffs precondition_coeffs(double sigma, double sigma_data);

/// Posterior-mean denoiser for x0 ~ N(0, s^2 I): y * s^2/(s^2 + sigma^2).
/// Closed-form oracle for sampler and loss tests.
template <typename T>
Tensor<T> analytic_gaussian_denoiser(const Tensor<T>& y, double sigma, double s);

struct BackboneConfig {
    int model_channels = 64;
    std::vector<int> channel_multipliers = {1, 2, 2, 2};
    std::set<int> attention_resolutions = {16};
    int blocks_per_level = 2;
    int groupnorm_groups = 8;
    double dropout = 0.0;
    int emb_channels_mult = 4;
    int num_classes = 4;
    int in_channels = 3;
    int height = 64;
    int width = 64;

    int levels() const { return static_cast<int>(channel_multipliers.size()); }
    int emb_channels() const { return model_channels * emb_channels_mult; }
    void validate() const;

    void to_meta(Container& c, const std::string& prefix = "backbone.") const;
    static BackboneConfig from_meta(const Container& c, const std::string& prefix = "backbone.");
};

/// Encoder/decoder denoising backbone: per-resolution residual blocks
/// (group norm -> SiLU -> conv) with additive noise/label conditioning,
/// skip concatenation, strided-conv downsampling, nearest upsampling + conv,
/// and optional self-attention at configured resolutions. The final conv is
/// zero-initialized so an untrained wrapper starts at D(x) = c_skip * x.
template <typename T>
class Unet {
public:
    Unet(BackboneConfig config, Rng init_rng);

    /// x (N,C,H,W); one c_noise value and one label per sample.
    int forward(Tape<T>& t, int x, const std::vector<double>& c_noise, const std::vector<int>& labels, Mode mode,
                Rng* dropout_rng = nullptr);

    const BackboneConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

private:
    struct ResBlock {
        nn::GroupNorm<T> gn1, gn2;
        nn::Conv2d<T> conv1, conv2;
        nn::Linear<T> emb_proj;
        nn::Conv2d<T> skip;  // 1x1 when channels change
        bool has_skip = false;
        int forward(Tape<T>& t, int x, int emb_silu, Mode mode, double dropout, Rng* rng) const;
    };

    struct AttnBlock {
        nn::GroupNorm<T> gn;
        nn::Conv2d<T> q, k, v, proj;
        int forward(Tape<T>& t, int x) const;
    };

    ResBlock make_res_block(const std::string& name, std::int64_t cin, std::int64_t cout, Rng& rng);
    AttnBlock make_attn_block(const std::string& name, std::int64_t channels, Rng& rng);
    bool attention_at_level(int level) const;

    BackboneConfig cfg_;
    ParamStore<T> params_;

    nn::Linear<T> emb_fc0_, emb_fc1_;
    nn::Embedding<T> label_emb_;
    nn::Conv2d<T> conv_in_;
    std::vector<std::vector<ResBlock>> enc_blocks_;
    std::vector<nn::Conv2d<T>> down_;  // down_[l] maps level l-1 -> l
    std::vector<std::unique_ptr<AttnBlock>> enc_attn_;
    ResBlock mid1_, mid2_;
    std::unique_ptr<AttnBlock> mid_attn_;
    std::vector<std::vector<ResBlock>> dec_blocks_;
    std::vector<nn::Conv2d<T>> up_;  // up_[l] maps level l -> l-1 after upsample
    std::vector<std::unique_ptr<AttnBlock>> dec_attn_;
    nn::GroupNorm<T> out_gn_;
    nn::Conv2d<T> out_conv_;
};

/// The conditional denoiser D(x; sigma, label): EDM preconditioning around
/// the backbone, plus the label vocabulary it was built for.
template <typename T>
class DenoiserModel {
public:
    DenoiserModel(BackboneConfig config, double sigma_data, std::vector<std::string> label_vocab,
                  std::uint64_t init_seed);

    /// Graph-building form used by the training loss.
    int denoise_on_tape(Tape<T>& t, int x, const std::vector<double>& sigmas, const std::vector<int>& labels,
                        Mode mode, Rng* dropout_rng = nullptr);

    /// Inference for a batch at a shared noise level.
    Tensor<T> denoise(const Tensor<T>& x, double sigma, const std::vector<int>& labels);

    Unet<T>& backbone() { return backbone_; }
    const BackboneConfig& config() const { return backbone_.config(); }
    double sigma_data() const { return sigma_data_; }
    const std::vector<std::string>& label_vocab() const { return label_vocab_; }
    ParamStore<T>& params() { return backbone_.params(); }

    void save(Container& c) const;
    static DenoiserModel load(const Container& c);

private:
    Unet<T> backbone_;
    double sigma_data_;
    std::vector<std::string> label_vocab_;
};

}  // namespace idg
