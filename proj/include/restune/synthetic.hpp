// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "restune/random.hpp"
#include "restune/tensor.hpp"

namespace restune {

/// Class-conditional Gaussian token sequences: every token of a sample is the
/// class mean plus isotropic noise. Train and test are drawn from disjoint
/// generator streams, and classes stay balanced by construction.
struct SyntheticTaskConfig {
    std::string id = "task0";
    std::size_t classes = 2;
    std::size_t seq_len = 16;
    std::size_t model_dim = 32;
    std::size_t train_per_class = 32;
    std::size_t test_per_class = 32;
    double mean_scale = 1.0;
    double noise = 0.5;
    std::uint64_t seed = 1;

    void validate() const {
        if (classes < 2) throw std::invalid_argument("SyntheticTaskConfig: need at least 2 classes");
        if (seq_len < 1 || model_dim < 1) throw std::invalid_argument("SyntheticTaskConfig: empty sequence shape");
        if (train_per_class < 1 || test_per_class < 1)
            throw std::invalid_argument("SyntheticTaskConfig: need at least one sample per class per split");
    }
};

struct Sample {
    TensorPtr tokens; // [seq_len x model_dim]
    std::size_t label = 0;
};

struct SyntheticTask {
    SyntheticTaskConfig config;
    std::vector<Sample> train, test;

    static SyntheticTask generate(const SyntheticTaskConfig& cfg) {
        cfg.validate();
        SyntheticTask task;
        task.config = cfg;
        Rng root(cfg.seed);
        std::vector<std::vector<double>> means(cfg.classes, std::vector<double>(cfg.model_dim));
        for (auto& mu : means)
            for (auto& v : mu) v = root.gaussian(0.0, cfg.mean_scale);

        auto fill = [&](std::vector<Sample>& out, std::size_t per_class, Rng rng) {
            for (std::size_t i = 0; i < per_class; ++i)
                for (std::size_t c = 0; c < cfg.classes; ++c) {
                    Sample s;
                    s.label = c;
                    s.tokens = make_tensor({cfg.seq_len, cfg.model_dim});
                    for (std::size_t t = 0; t < cfg.seq_len; ++t)
                        for (std::size_t j = 0; j < cfg.model_dim; ++j)
                            s.tokens->data[t * cfg.model_dim + j] = means[c][j] + rng.gaussian(0.0, cfg.noise);
                    out.push_back(std::move(s));
                }
        };
        fill(task.train, cfg.train_per_class, root.fork(1));
        fill(task.test, cfg.test_per_class, root.fork(2));
        return task;
    }
};

} // namespace restune
