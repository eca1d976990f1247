#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "idg/embedding.hpp"

namespace idg {

/// Sectioned key=value run configuration. Defaults reproduce the reference
/// training setup; a desk-scale run overrides what it needs. Unknown sections
/// or keys are rejected so a manifest echo always describes the full state.
struct RunConfig {
    struct Run {
        std::uint64_t seed = 1;
    } run;

    struct Embedding {
        std::int64_t m = 15;
        std::int64_t n = 64;
        std::int64_t length = 1024;
        std::int64_t target_height = 64;
        std::int64_t target_width = 64;
    } embedding;

    struct Data {
        std::int64_t window = 1024;
        double overlap = 0.5;
        std::int64_t drop = 1500;
        double rate_hz = 200.0;
        bool resample = false;
        std::string stats_split = "train";  // train | all
        std::string labels = "bag,body,handheld,leg";
        double train_fraction = 0.70;
        double val_fraction = 0.15;
        double test_fraction = 0.15;
    } data;

    struct Diffusion {
        double sigma_min = 0.002;
        double sigma_max = 80.0;
        double sigma_data = 0.5;
        int steps = 18;       // Heun sampler steps
        double rho = 7.0;     // schedule warp exponent
        double p_mean = -1.2;
        double p_std = 1.2;
        double lr = 1e-4;
        int batch = 128;
        int epochs = 1000;
        int checkpoint_every = 100;  // epochs between checkpoints; 0 = final only
        int nonfinite_retries = 3;
    } diffusion;

    struct Backbone {
        int model_channels = 64;
        std::vector<int> channel_multipliers = {1, 2, 2, 2};
        std::vector<int> attention_resolutions = {16};
        int blocks_per_level = 2;
        int groupnorm_groups = 8;
        double dropout = 0.0;
        int emb_channels_mult = 4;
    } backbone;

    struct Classifier {
        double lr = 0.001;
        double weight_decay = 1e-5;
        int patience = 10;
        int max_epochs = 200;
        int batch = 64;
        double dropout = 0.5;
        int hidden = 256;
        int adaptive_pool_image = 4;
        int adaptive_pool_signal = 4;
    } classifier;

    struct Evaluation {
        int bins = 100;
        double tsne_perplexity = 30.0;
        int tsne_iterations = 1000;
        double tsne_learning_rate = 200.0;
        double tsne_early_exaggeration = 12.0;
        int tsne_exaggeration_iters = 250;
        bool tsne = true;
        int tsne_max_points = 2000;
        int fid_shrinkage_enabled = 1;
    } evaluation;

    EmbeddingParams embedding_params() const {
        return EmbeddingParams{embedding.m, embedding.n, embedding.length};
    }

    /// Canonical INI echo of every effective value.
    std::string to_ini() const;

    static RunConfig parse(const std::string& ini_text);
    static RunConfig parse_file(const std::string& path);
};

}  // namespace idg
