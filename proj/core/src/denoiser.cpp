#include "idg/denoiser.hpp"

#include <cmath>
#include <sstream>

namespace idg {

EdmCoeffs precondition_coeffs(double sigma, double sigma_data) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
        throw std::invalid_argument("precondition_coeffs: sigma must be positive and finite");
    }
    if (!(sigma_data > 0.0) || !std::isfinite(sigma_data)) {
        throw std::invalid_argument("precondition_coeffs: sigma_data must be positive and finite");
    }
    const double s2 = sigma * sigma + sigma_data * sigma_data;
    EdmCoeffs c{};
    c.sigma = sigma;
    c.sigma_data = sigma_data;
    c.c_skip = sigma_data * sigma_data / s2;
    c.c_out = sigma * sigma_data / std::sqrt(s2);
    c.c_in = 1.0 / std::sqrt(s2);
    c.c_noise = std::log(sigma) / 4.0;
    return c;
}

template <typename T>
Tensor<T> analytic_gaussian_denoiser(const Tensor<T>& y, double sigma, double s) {
    if (!(sigma > 0.0) || !(s > 0.0)) {
        throw std::invalid_argument("analytic_gaussian_denoiser: sigma and s must be positive");
    }
    const T k = static_cast<T>(s * s / (s * s + sigma * sigma));
    Tensor<T> out(y.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) out[i] = k * y[i];
    return out;
}

template Tensor<float> analytic_gaussian_denoiser<float>(const Tensor<float>&, double, double);
template Tensor<double> analytic_gaussian_denoiser<double>(const Tensor<double>&, double, double);

void BackboneConfig::validate() const {
    if (model_channels <= 0 || model_channels % 2) {
        throw std::invalid_argument("backbone: model_channels must be positive and even");
    }
    if (channel_multipliers.empty()) throw std::invalid_argument("backbone: channel_multipliers empty");
    for (int m : channel_multipliers) {
        if (m <= 0) throw std::invalid_argument("backbone: non-positive channel multiplier");
    }
    if (num_classes < 1) throw std::invalid_argument("backbone: num_classes must be >= 1");
    if (blocks_per_level < 1) throw std::invalid_argument("backbone: blocks_per_level must be >= 1");
    const int down = 1 << (levels() - 1);
    if (height % down || width % down) {
        throw std::invalid_argument("backbone: input " + std::to_string(height) + "x" + std::to_string(width) +
                                    " not divisible by 2^" + std::to_string(levels() - 1));
    }
}

void BackboneConfig::to_meta(Container& c, const std::string& prefix) const {
    auto join = [](const auto& v) {
        std::ostringstream os;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i) os << ',';
            os << *(std::next(v.begin(), static_cast<std::ptrdiff_t>(i)));
        }
        return os.str();
    };
    c.set_meta(prefix + "model_channels", std::to_string(model_channels));
    c.set_meta(prefix + "channel_multipliers", join(channel_multipliers));
    std::vector<int> attn(attention_resolutions.begin(), attention_resolutions.end());
    c.set_meta(prefix + "attention_resolutions", join(attn));
    c.set_meta(prefix + "blocks_per_level", std::to_string(blocks_per_level));
    c.set_meta(prefix + "groupnorm_groups", std::to_string(groupnorm_groups));
    c.set_meta(prefix + "dropout", std::to_string(dropout));
    c.set_meta(prefix + "emb_channels_mult", std::to_string(emb_channels_mult));
    c.set_meta(prefix + "num_classes", std::to_string(num_classes));
    c.set_meta(prefix + "in_channels", std::to_string(in_channels));
    c.set_meta(prefix + "height", std::to_string(height));
    c.set_meta(prefix + "width", std::to_string(width));
}

BackboneConfig BackboneConfig::from_meta(const Container& c, const std::string& prefix) {
    auto split = [](const std::string& s) {
        std::vector<int> out;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!item.empty()) out.push_back(std::stoi(item));
        }
        return out;
    };
    BackboneConfig b;
    b.model_channels = std::stoi(c.meta_or_throw(prefix + "model_channels"));
    b.channel_multipliers = split(c.meta_or_throw(prefix + "channel_multipliers"));
    auto attn = split(c.meta_or_throw(prefix + "attention_resolutions"));
    b.attention_resolutions = std::set<int>(attn.begin(), attn.end());
    b.blocks_per_level = std::stoi(c.meta_or_throw(prefix + "blocks_per_level"));
    b.groupnorm_groups = std::stoi(c.meta_or_throw(prefix + "groupnorm_groups"));
    b.dropout = std::stod(c.meta_or_throw(prefix + "dropout"));
    b.emb_channels_mult = std::stoi(c.meta_or_throw(prefix + "emb_channels_mult"));
    b.num_classes = std::stoi(c.meta_or_throw(prefix + "num_classes"));
    b.in_channels = std::stoi(c.meta_or_throw(prefix + "in_channels"));
    b.height = std::stoi(c.meta_or_throw(prefix + "height"));
    b.width = std::stoi(c.meta_or_throw(prefix + "width"));
    b.validate();
    return b;
}

namespace {

/// Sinusoidal features of the conditioning scalar, dimension = channels.
template <typename T>
Tensor<T> sinusoidal_embedding(const std::vector<double>& values, std::int64_t channels) {
    const std::int64_t N = static_cast<std::int64_t>(values.size());
    const std::int64_t half = channels / 2;
    Tensor<T> out({N, channels});
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                         static_cast<double>(half > 1 ? half - 1 : 1));
            const double arg = values[static_cast<std::size_t>(n)] * freq;
            out[n * channels + 2 * i] = static_cast<T>(std::sin(arg));
            out[n * channels + 2 * i + 1] = static_cast<T>(std::cos(arg));
        }
    }
    return out;
}

}  // namespace

template <typename T>
typename Unet<T>::ResBlock Unet<T>::make_res_block(const std::string& name, std::int64_t cin, std::int64_t cout,
                                                   Rng& rng) {
    ResBlock b;
    b.gn1 = nn::GroupNorm<T>(params_, name + "/gn1", cin, cfg_.groupnorm_groups);
    b.conv1 = nn::Conv2d<T>(params_, name + "/conv1", cin, cout, 3, 1, 1, rng);
    b.emb_proj = nn::Linear<T>(params_, name + "/emb_proj", cfg_.emb_channels(), cout, rng);
    b.gn2 = nn::GroupNorm<T>(params_, name + "/gn2", cout, cfg_.groupnorm_groups);
    b.conv2 = nn::Conv2d<T>(params_, name + "/conv2", cout, cout, 3, 1, 1, rng);
    if (cin != cout) {
        b.skip = nn::Conv2d<T>(params_, name + "/skip", cin, cout, 1, 1, 0, rng);
        b.has_skip = true;
    }
    return b;
}

template <typename T>
int Unet<T>::ResBlock::forward(Tape<T>& t, int x, int emb_silu, Mode mode, double dropout, Rng* rng) const {
    int h = conv1.forward(t, ops::silu(t, gn1.forward(t, x)));
    h = ops::add_channel_bias(t, h, emb_proj.forward(t, emb_silu));
    h = ops::silu(t, gn2.forward(t, h));
    if (dropout > 0.0 && rng) h = ops::dropout(t, h, dropout, mode == Mode::train, *rng);
    h = conv2.forward(t, h);
    const int s = has_skip ? skip.forward(t, x) : x;
    return ops::add(t, h, s);
}

template <typename T>
typename Unet<T>::AttnBlock Unet<T>::make_attn_block(const std::string& name, std::int64_t channels, Rng& rng) {
    AttnBlock a;
    a.gn = nn::GroupNorm<T>(params_, name + "/gn", channels, cfg_.groupnorm_groups);
    a.q = nn::Conv2d<T>(params_, name + "/q", channels, channels, 1, 1, 0, rng);
    a.k = nn::Conv2d<T>(params_, name + "/k", channels, channels, 1, 1, 0, rng);
    a.v = nn::Conv2d<T>(params_, name + "/v", channels, channels, 1, 1, 0, rng);
    a.proj = nn::Conv2d<T>(params_, name + "/proj", channels, channels, 1, 1, 0, rng, /*zero_init=*/true);
    return a;
}

template <typename T>
int Unet<T>::AttnBlock::forward(Tape<T>& t, int x) const {
    const auto& shape = t.value(x).shape();
    const std::int64_t N = shape[0], C = shape[1], H = shape[2], W = shape[3];
    const int g = gn.forward(t, x);
    auto flat = [&](int id) { return ops::reshape(t, id, {N, C, H * W}); };
    int att = ops::attention(t, flat(q.forward(t, g)), flat(k.forward(t, g)), flat(v.forward(t, g)));
    att = proj.forward(t, ops::reshape(t, att, {N, C, H, W}));
    return ops::add(t, x, att);
}

template <typename T>
bool Unet<T>::attention_at_level(int level) const {
    return cfg_.attention_resolutions.count(cfg_.height >> level) > 0;
}

template <typename T>
Unet<T>::Unet(BackboneConfig config, Rng init_rng) : cfg_(std::move(config)) {
    cfg_.validate();
    Rng rng = init_rng;
    const int L = cfg_.levels();
    const int mc = cfg_.model_channels;
    const std::int64_t emb = cfg_.emb_channels();
    auto ch = [&](int level) { return static_cast<std::int64_t>(mc * cfg_.channel_multipliers[static_cast<std::size_t>(level)]); };

    emb_fc0_ = nn::Linear<T>(params_, "backbone/emb/fc0", mc, emb, rng);
    emb_fc1_ = nn::Linear<T>(params_, "backbone/emb/fc1", emb, emb, rng);
    label_emb_ = nn::Embedding<T>(params_, "backbone/emb/label", cfg_.num_classes, mc, rng, 0.5);
    conv_in_ = nn::Conv2d<T>(params_, "backbone/conv_in", cfg_.in_channels, ch(0), 3, 1, 1, rng);

    enc_blocks_.resize(static_cast<std::size_t>(L));
    dec_blocks_.resize(static_cast<std::size_t>(L));
    enc_attn_.resize(static_cast<std::size_t>(L));
    dec_attn_.resize(static_cast<std::size_t>(L));
    down_.resize(static_cast<std::size_t>(L));
    up_.resize(static_cast<std::size_t>(L));

    for (int l = 0; l < L; ++l) {
        if (l > 0) {
            down_[static_cast<std::size_t>(l)] =
                nn::Conv2d<T>(params_, "backbone/down" + std::to_string(l), ch(l - 1), ch(l), 3, 2, 1, rng);
        }
        for (int b = 0; b < cfg_.blocks_per_level; ++b) {
            enc_blocks_[static_cast<std::size_t>(l)].push_back(
                make_res_block("backbone/enc" + std::to_string(l) + "/block" + std::to_string(b), ch(l), ch(l), rng));
        }
        if (attention_at_level(l)) {
            enc_attn_[static_cast<std::size_t>(l)] = std::make_unique<AttnBlock>(
                make_attn_block("backbone/enc" + std::to_string(l) + "/attn", ch(l), rng));
        }
    }

    mid1_ = make_res_block("backbone/mid/block0", ch(L - 1), ch(L - 1), rng);
    if (attention_at_level(L - 1)) {
        mid_attn_ = std::make_unique<AttnBlock>(make_attn_block("backbone/mid/attn", ch(L - 1), rng));
    }
    mid2_ = make_res_block("backbone/mid/block1", ch(L - 1), ch(L - 1), rng);

    for (int l = L - 1; l >= 0; --l) {
        for (int b = 0; b < cfg_.blocks_per_level; ++b) {
            const std::int64_t cin = b == 0 ? 2 * ch(l) : ch(l);
            dec_blocks_[static_cast<std::size_t>(l)].push_back(
                make_res_block("backbone/dec" + std::to_string(l) + "/block" + std::to_string(b), cin, ch(l), rng));
        }
        if (attention_at_level(l)) {
            dec_attn_[static_cast<std::size_t>(l)] = std::make_unique<AttnBlock>(
                make_attn_block("backbone/dec" + std::to_string(l) + "/attn", ch(l), rng));
        }
        if (l > 0) {
            up_[static_cast<std::size_t>(l)] =
                nn::Conv2d<T>(params_, "backbone/up" + std::to_string(l), ch(l), ch(l - 1), 3, 1, 1, rng);
        }
    }

    out_gn_ = nn::GroupNorm<T>(params_, "backbone/out/gn", ch(0), cfg_.groupnorm_groups);
    out_conv_ = nn::Conv2d<T>(params_, "backbone/out/conv", ch(0), cfg_.in_channels, 3, 1, 1, rng,
                              /*zero_init=*/true);
}

template <typename T>
int Unet<T>::forward(Tape<T>& t, int x, const std::vector<double>& c_noise, const std::vector<int>& labels,
                     Mode mode, Rng* dropout_rng) {
    const auto& xs = t.value(x).shape();
    if (xs.size() != 4 || xs[1] != cfg_.in_channels || xs[2] != cfg_.height || xs[3] != cfg_.width) {
        throw std::invalid_argument("backbone: input " + shape_str(xs) + " does not match configured " +
                                    std::to_string(cfg_.in_channels) + "x" + std::to_string(cfg_.height) + "x" +
                                    std::to_string(cfg_.width));
    }
    const std::int64_t N = xs[0];
    if (static_cast<std::int64_t>(c_noise.size()) != N || static_cast<std::int64_t>(labels.size()) != N) {
        throw std::invalid_argument("backbone: need one c_noise and one label per sample");
    }
    for (int lbl : labels) {
        if (lbl < 0 || lbl >= cfg_.num_classes) {
            throw std::invalid_argument("backbone: label " + std::to_string(lbl) + " outside vocabulary of " +
                                        std::to_string(cfg_.num_classes));
        }
    }

    // noise + class conditioning pathway
    int emb = t.leaf(sinusoidal_embedding<T>(c_noise, cfg_.model_channels));
    emb = ops::add(t, emb, label_emb_.forward(t, labels));
    emb = emb_fc1_.forward(t, ops::silu(t, emb_fc0_.forward(t, emb)));
    const int emb_silu = ops::silu(t, emb);

    const int L = cfg_.levels();
    int h = conv_in_.forward(t, x);
    std::vector<int> saved(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) {
        if (l > 0) h = down_[static_cast<std::size_t>(l)].forward(t, h);
        for (const auto& blk : enc_blocks_[static_cast<std::size_t>(l)]) {
            h = blk.forward(t, h, emb_silu, mode, cfg_.dropout, dropout_rng);
        }
        if (enc_attn_[static_cast<std::size_t>(l)]) h = enc_attn_[static_cast<std::size_t>(l)]->forward(t, h);
        saved[static_cast<std::size_t>(l)] = h;
    }

    h = mid1_.forward(t, h, emb_silu, mode, cfg_.dropout, dropout_rng);
    if (mid_attn_) h = mid_attn_->forward(t, h);
    h = mid2_.forward(t, h, emb_silu, mode, cfg_.dropout, dropout_rng);

    for (int l = L - 1; l >= 0; --l) {
        h = ops::concat_channels(t, h, saved[static_cast<std::size_t>(l)]);
        for (const auto& blk : dec_blocks_[static_cast<std::size_t>(l)]) {
            h = blk.forward(t, h, emb_silu, mode, cfg_.dropout, dropout_rng);
        }
        if (dec_attn_[static_cast<std::size_t>(l)]) h = dec_attn_[static_cast<std::size_t>(l)]->forward(t, h);
        if (l > 0) {
            h = up_[static_cast<std::size_t>(l)].forward(t, ops::upsample_nearest2d(t, h, 2));
        }
    }

    return out_conv_.forward(t, ops::silu(t, out_gn_.forward(t, h)));
}

template <typename T>
DenoiserModel<T>::DenoiserModel(BackboneConfig config, double sigma_data, std::vector<std::string> label_vocab,
                                std::uint64_t init_seed)
    : backbone_(std::move(config), Rng(init_seed).substream("init")),
      sigma_data_(sigma_data),
      label_vocab_(std::move(label_vocab)) {
    if (sigma_data_ <= 0.0) throw std::invalid_argument("denoiser: sigma_data must be positive");
    if (static_cast<int>(label_vocab_.size()) != backbone_.config().num_classes) {
        throw std::invalid_argument("denoiser: label vocabulary size does not match num_classes");
    }
}

template <typename T>
int DenoiserModel<T>::denoise_on_tape(Tape<T>& t, int x, const std::vector<double>& sigmas,
                                      const std::vector<int>& labels, Mode mode, Rng* dropout_rng) {
    const std::int64_t N = t.value(x).dim(0);
    if (static_cast<std::int64_t>(sigmas.size()) != N) {
        throw std::invalid_argument("denoise: need one sigma per sample");
    }
    std::vector<T> c_in(sigmas.size()), c_skip(sigmas.size()), c_out(sigmas.size());
    std::vector<double> c_noise(sigmas.size());
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
        const EdmCoeffs co = precondition_coeffs(sigmas[i], sigma_data_);
        c_in[i] = static_cast<T>(co.c_in);
        c_skip[i] = static_cast<T>(co.c_skip);
        c_out[i] = static_cast<T>(co.c_out);
        c_noise[i] = co.c_noise;
    }
    const int scaled = ops::sample_scale(t, x, c_in);
    const int f = backbone_.forward(t, scaled, c_noise, labels, mode, dropout_rng);
    return ops::add(t, ops::sample_scale(t, x, c_skip), ops::sample_scale(t, f, c_out));
}

template <typename T>
Tensor<T> DenoiserModel<T>::denoise(const Tensor<T>& x, double sigma, const std::vector<int>& labels) {
    Tape<T> t;
    const int xid = t.leaf(x);
    const std::vector<double> sigmas(static_cast<std::size_t>(x.dim(0)), sigma);
    const int d = denoise_on_tape(t, xid, sigmas, labels, Mode::eval);
    return t.value(d);
}

template <typename T>
void DenoiserModel<T>::save(Container& c) const {
    backbone_.config().to_meta(c);
    c.set_meta("denoiser.sigma_data", std::to_string(sigma_data_));
    std::string vocab;
    for (std::size_t i = 0; i < label_vocab_.size(); ++i) {
        if (i) vocab += ',';
        vocab += label_vocab_[i];
    }
    c.set_meta("denoiser.labels", vocab);
    backbone_.params().save(c);
}

template <typename T>
DenoiserModel<T> DenoiserModel<T>::load(const Container& c) {
    BackboneConfig config = BackboneConfig::from_meta(c);
    const double sigma_data = std::stod(c.meta_or_throw("denoiser.sigma_data"));
    std::vector<std::string> vocab;
    {
        std::stringstream ss(c.meta_or_throw("denoiser.labels"));
        std::string item;
        while (std::getline(ss, item, ',')) vocab.push_back(item);
    }
    DenoiserModel model(std::move(config), sigma_data, std::move(vocab), /*init_seed=*/0);
    model.params().load(c);
    return model;
}

template class Unet<float>;
template class Unet<double>;
template class DenoiserModel<float>;
template class DenoiserModel<double>;

}  // namespace idg
