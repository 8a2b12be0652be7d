#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "mgic/layers.hpp"
#include "mgic/sgd.hpp"

namespace mgic {

struct TrainHistory {
    struct Row {
        std::int64_t epoch;
        double train_loss;
        double eval_metric;
    };
    std::vector<Row> rows;
    bool diverged = false;
    std::int64_t last_good_epoch = -1;
};

// Generic epoch loop: seeded per-epoch shuffling, mini-batch steps through the
// supplied loss closure, one evaluation per epoch. Aborts on a non-finite
// batch loss, reporting the last completed epoch.
template <typename T>
TrainHistory train_loop(Module<T>& model, std::int64_t n_samples, const SgdConfig& cfg,
                        const std::function<Tensor<T>(Tape<T>&, const std::vector<std::int64_t>&)>& batch_loss,
                        const std::function<double()>& evaluate) {
    cfg.validate();
    TrainHistory history;
    auto params = collect_params(model);
    SgdOptimizer<T> opt(params, cfg);
    Rng shuffle_rng = Rng(cfg.seed).stream(kShuffleStream);
    std::vector<std::int64_t> order(static_cast<std::size_t>(n_samples));
    std::iota(order.begin(), order.end(), 0);
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        model.set_training(true);
        shuffle_rng.shuffle(order);
        double loss_sum = 0;
        std::int64_t batches = 0;
        for (std::int64_t start = 0; start < n_samples; start += cfg.batch_size) {
            const std::int64_t end = std::min(n_samples, start + cfg.batch_size);
            std::vector<std::int64_t> batch(order.begin() + start, order.begin() + end);
            Tape<T> tape;
            Tensor<T> loss = batch_loss(tape, batch);
            const double value = static_cast<double>(loss.data()[0]);
            if (!std::isfinite(value)) {
                history.diverged = true;
                history.last_good_epoch = epoch - 1;
                return history;
            }
            opt.zero_grad();
            tape.backward(loss);
            opt.step(lr_at(epoch, cfg));
            loss_sum += value;
            ++batches;
        }
        model.set_training(false);
        history.rows.push_back({epoch, loss_sum / static_cast<double>(batches), evaluate()});
        history.last_good_epoch = epoch;
    }
    return history;
}

}  // namespace mgic
