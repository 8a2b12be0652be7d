#pragma once

#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "mgic/layers.hpp"

namespace mgic {

// ---------------------------------------------------------------------------
// Hierarchy arithmetic.
// ---------------------------------------------------------------------------

// Number of restriction steps for a block with c_in channels and coarsest
// grid size s_c: floor(log2(c_in / s_c)). Zero degenerates the block to one
// fully-coupled template application.
inline std::int64_t num_levels(std::int64_t c_in, std::int64_t s_c) {
    if (s_c < 1) throw ConfigError("num_levels: s_c must be >= 1");
    if (c_in < s_c) {
        throw ConfigError("num_levels: c_in=" + std::to_string(c_in) + " is below s_c=" +
                          std::to_string(s_c));
    }
    std::int64_t n = 0;
    std::int64_t q = c_in / s_c;
    while (q >= 2) {
        q /= 2;
        ++n;
    }
    return n;
}

// Largest integer <= s_g dividing every width in the list (>= 1 always).
inline std::int64_t effective_group_size(std::int64_t s_g, const std::vector<std::int64_t>& widths) {
    if (widths.empty()) throw ConfigError("effective_group_size: empty width list");
    for (std::int64_t t = s_g; t >= 2; --t) {
        bool ok = true;
        for (std::int64_t w : widths) ok = ok && (w % t == 0);
        if (ok) return t;
    }
    return 1;
}

// ---------------------------------------------------------------------------
// Reference CNN-block templates. An instance maps c -> c channels at the same
// spatial size; group size s = c yields the fully coupled variant.
// ---------------------------------------------------------------------------

struct BlockTemplate {
    enum class Kind { SimpleConv, Bottleneck, Sequence };
    Kind kind = Kind::SimpleConv;
    std::int64_t d = 3;            // square conv kernel size (odd)
    double mid_factor = 0.25;      // bottleneck hidden width = round(mid_factor * c)
    std::vector<std::int64_t> seq_kernels;  // Sequence variant

    static BlockTemplate simple_conv(std::int64_t d) { return {Kind::SimpleConv, d, 0.25, {}}; }
    static BlockTemplate bottleneck(double mid_factor, std::int64_t d) {
        return {Kind::Bottleneck, d, mid_factor, {}};
    }
    static BlockTemplate sequence(std::vector<std::int64_t> kernels) {
        return {Kind::Sequence, 3, 0.25, std::move(kernels)};
    }
};

template <typename T>
class TemplateBlock : public Module<T> {
public:
    // Zeroes the residual branch so the block realizes the identity map.
    // Returns false for templates without a residual structure.
    virtual bool zero_residual() { return false; }
};

namespace detail {
inline void check_odd_kernel(std::int64_t d) {
    if (d < 1 || d % 2 == 0) {
        throw ConfigError("block template: kernel size must be odd to preserve spatial extent, got " +
                          std::to_string(d));
    }
}
inline void check_group(std::int64_t width, std::int64_t s, const std::string& what) {
    if (s < 1 || width % s != 0) {
        throw ConfigError(what + ": group size " + std::to_string(s) + " does not divide width " +
                          std::to_string(width));
    }
}
}  // namespace detail

// conv(d) -> batchnorm -> relu.
template <typename T>
class SimpleConvBlock : public TemplateBlock<T> {
public:
    SimpleConvBlock(std::int64_t width, std::int64_t group_size, std::int64_t d, Rng& rng)
        : width_(width), group_size_(group_size) {
        detail::check_odd_kernel(d);
        detail::check_group(width, group_size, "simple block");
        conv_ = std::make_unique<Conv2d<T>>(width, width, d, 1, (d - 1) / 2, width / group_size,
                                            false, rng);
        norm_ = std::make_unique<BatchNorm2d<T>>(width);
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) override {
        return ops::relu(tape, norm_->forward(tape, conv_->forward(tape, x)));
    }

    void visit(const std::string& prefix, const typename Module<T>::ParamVisitor& on_param,
               const typename Module<T>::BufferVisitor& on_buffer) override {
        conv_->visit(detail::join(prefix, "conv"), on_param, on_buffer);
        norm_->visit(detail::join(prefix, "norm"), on_param, on_buffer);
    }

    void set_training(bool training) override { norm_->set_training(training); }

    NetDesc describe() const override {
        NetDesc d;
        d.kind = "simple_block";
        d.attr = {{"width", width_}, {"group_size", group_size_}};
        NetDesc c = conv_->describe();
        c.name = "conv";
        NetDesc n = norm_->describe();
        n.name = "norm";
        d.children = {std::move(c), std::move(n), NetDesc{"relu", "act", {}, {}}};
        return d;
    }

    Conv2d<T>& conv() { return *conv_; }

private:
    std::int64_t width_, group_size_;
    std::unique_ptr<Conv2d<T>> conv_;
    std::unique_ptr<BatchNorm2d<T>> norm_;
};

// Pre-activation residual bottleneck:
//   x + K3 relu(N(K2 relu(N(K1 relu(N(x))))))
// with K1, K3 pointwise and K2 the d x d spatial convolution, all sharing the
// block's group count.
template <typename T>
class BottleneckBlock : public TemplateBlock<T> {
public:
    BottleneckBlock(std::int64_t width, std::int64_t group_size, double mid_factor, std::int64_t d,
                    Rng& rng)
        : width_(width), group_size_(group_size) {
        detail::check_odd_kernel(d);
        detail::check_group(width, group_size, "bottleneck");
        const std::int64_t groups = width / group_size;
        mid_ = static_cast<std::int64_t>(std::llround(mid_factor * static_cast<double>(width)));
        if (mid_ < groups || mid_ % groups != 0) {
            throw ConfigError("bottleneck: hidden width " + std::to_string(mid_) +
                              " is not divisible into " + std::to_string(groups) + " groups");
        }
        norm1_ = std::make_unique<BatchNorm2d<T>>(width);
        k1_ = std::make_unique<Conv2d<T>>(width, mid_, 1, 1, 0, groups, false, rng);
        norm2_ = std::make_unique<BatchNorm2d<T>>(mid_);
        k2_ = std::make_unique<Conv2d<T>>(mid_, mid_, d, 1, (d - 1) / 2, groups, false, rng);
        norm3_ = std::make_unique<BatchNorm2d<T>>(mid_);
        k3_ = std::make_unique<Conv2d<T>>(mid_, width, 1, 1, 0, groups, false, rng);
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) override {
        Tensor<T> t = ops::relu(tape, norm1_->forward(tape, x));
        t = k1_->forward(tape, t);
        t = ops::relu(tape, norm2_->forward(tape, t));
        t = k2_->forward(tape, t);
        t = ops::relu(tape, norm3_->forward(tape, t));
        t = k3_->forward(tape, t);
        return ops::add(tape, x, t);
    }

    bool zero_residual() override {
        k3_->zero_weights();
        return true;
    }

    void visit(const std::string& prefix, const typename Module<T>::ParamVisitor& on_param,
               const typename Module<T>::BufferVisitor& on_buffer) override {
        norm1_->visit(detail::join(prefix, "norm1"), on_param, on_buffer);
        k1_->visit(detail::join(prefix, "conv1"), on_param, on_buffer);
        norm2_->visit(detail::join(prefix, "norm2"), on_param, on_buffer);
        k2_->visit(detail::join(prefix, "conv2"), on_param, on_buffer);
        norm3_->visit(detail::join(prefix, "norm3"), on_param, on_buffer);
        k3_->visit(detail::join(prefix, "conv3"), on_param, on_buffer);
    }

    void set_training(bool training) override {
        norm1_->set_training(training);
        norm2_->set_training(training);
        norm3_->set_training(training);
    }

    NetDesc describe() const override {
        NetDesc d;
        d.kind = "bottleneck";
        d.attr = {{"width", width_}, {"group_size", group_size_}, {"mid", mid_}};
        auto child = [](const NetDesc& base, const char* name) {
            NetDesc c = base;
            c.name = name;
            return c;
        };
        d.children = {child(norm1_->describe(), "norm1"), child(k1_->describe(), "conv1"),
                      child(norm2_->describe(), "norm2"), child(k2_->describe(), "conv2"),
                      child(norm3_->describe(), "norm3"), child(k3_->describe(), "conv3")};
        return d;
    }

    Conv2d<T>& k1() { return *k1_; }
    Conv2d<T>& k2() { return *k2_; }
    Conv2d<T>& k3() { return *k3_; }
    BatchNorm2d<T>& norm1() { return *norm1_; }
    BatchNorm2d<T>& norm2() { return *norm2_; }
    BatchNorm2d<T>& norm3() { return *norm3_; }
    std::int64_t mid() const { return mid_; }

private:
    std::int64_t width_, group_size_, mid_;
    std::unique_ptr<BatchNorm2d<T>> norm1_, norm2_, norm3_;
    std::unique_ptr<Conv2d<T>> k1_, k2_, k3_;
};

// conv(k_i) -> batchnorm -> relu for each listed kernel, all at width c.
template <typename T>
class SequenceBlock : public TemplateBlock<T> {
public:
    SequenceBlock(std::int64_t width, std::int64_t group_size, const std::vector<std::int64_t>& kernels,
                  Rng& rng)
        : width_(width), group_size_(group_size) {
        if (kernels.empty()) throw ConfigError("sequence block: empty layer list");
        detail::check_group(width, group_size, "sequence block");
        for (std::int64_t k : kernels) {
            detail::check_odd_kernel(k);
            auto stage = std::make_unique<SimpleConvBlock<T>>(width, group_size, k, rng);
            stages_.push_back(std::move(stage));
        }
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) override {
        Tensor<T> cur = x;
        for (auto& s : stages_) cur = s->forward(tape, cur);
        return cur;
    }

    void visit(const std::string& prefix, const typename Module<T>::ParamVisitor& on_param,
               const typename Module<T>::BufferVisitor& on_buffer) override {
        for (std::size_t i = 0; i < stages_.size(); ++i)
            stages_[i]->visit(detail::join(prefix, "layer" + std::to_string(i)), on_param, on_buffer);
    }

    void set_training(bool training) override {
        for (auto& s : stages_) s->set_training(training);
    }

    NetDesc describe() const override {
        NetDesc d;
        d.kind = "sequence_block";
        d.attr = {{"width", width_}, {"group_size", group_size_}};
        for (std::size_t i = 0; i < stages_.size(); ++i) {
            NetDesc c = stages_[i]->describe();
            c.name = "layer" + std::to_string(i);
            d.children.push_back(std::move(c));
        }
        return d;
    }

private:
    std::int64_t width_, group_size_;
    std::vector<std::unique_ptr<SimpleConvBlock<T>>> stages_;
};

template <typename T>
std::unique_ptr<TemplateBlock<T>> make_block_instance(const BlockTemplate& tpl, std::int64_t width,
                                                      std::int64_t group_size, Rng& rng) {
    switch (tpl.kind) {
        case BlockTemplate::Kind::SimpleConv:
            return std::make_unique<SimpleConvBlock<T>>(width, group_size, tpl.d, rng);
        case BlockTemplate::Kind::Bottleneck:
            return std::make_unique<BottleneckBlock<T>>(width, group_size, tpl.mid_factor, tpl.d, rng);
        case BlockTemplate::Kind::Sequence:
            return std::make_unique<SequenceBlock<T>>(width, group_size, tpl.seq_kernels, rng);
    }
    throw ConfigError("unknown block template kind");
}

// ---------------------------------------------------------------------------
// Transfer operators.
// ---------------------------------------------------------------------------

// Grouped pointwise restriction/prolongation pair at one hierarchy level.
// R halves the channel count group-locally (s -> s/2), P mirrors it (s/2 -> s).
// Both are initialized with strictly positive weights whose per-output-channel
// sums are 1, so channel-constant inputs pass through unchanged at init.
template <typename T>
class TransferPair {
public:
    TransferPair(std::int64_t width, std::int64_t group_size, std::int64_t level, Rng& rng)
        : width_(width), group_size_(group_size), level_(level) {
        detail::check_group(width, group_size, "transfer");
        if (group_size % 2 != 0) {
            throw ConfigError("transfer: group size must be even to halve channels, got " +
                              std::to_string(group_size));
        }
        const std::int64_t groups = width / group_size;
        restrict_ = std::make_unique<Conv2d<T>>(width, width / 2, 1, 1, 0, groups, false, rng,
                                                ParamKind::TransferWeight);
        prolong_ = std::make_unique<Conv2d<T>>(width / 2, width, 1, 1, 0, groups, false, rng,
                                               ParamKind::TransferWeight);
        row_stochastic_init(restrict_->weight(), group_size, rng);
        row_stochastic_init(prolong_->weight(), group_size / 2, rng);
    }

    Tensor<T> restrict_fwd(Tape<T>& tape, const Tensor<T>& x) {
        return restrict_->forward(tape, x);
    }
    Tensor<T> prolong_fwd(Tape<T>& tape, const Tensor<T>& x) { return prolong_->forward(tape, x); }

    void visit(const std::string& prefix, const typename Module<T>::ParamVisitor& on_param,
               const typename Module<T>::BufferVisitor& on_buffer) {
        restrict_->visit(detail::join(prefix, "R"), on_param, on_buffer);
        prolong_->visit(detail::join(prefix, "P"), on_param, on_buffer);
    }

    Conv2d<T>& restriction() { return *restrict_; }
    Conv2d<T>& prolongation() { return *prolong_; }
    std::int64_t width() const { return width_; }
    std::int64_t group_size() const { return group_size_; }
    std::int64_t level() const { return level_; }

    NetDesc describe(const char* name) const {
        NetDesc d;
        d.kind = "transfer_pair";
        d.name = name;
        d.attr = {{"width", width_}, {"group_size", group_size_}, {"level", level_}};
        NetDesc r = restrict_->describe();
        r.name = "R";
        NetDesc p = prolong_->describe();
        p.name = "P";
        d.children = {std::move(r), std::move(p)};
        return d;
    }

private:
    // Exponentially distributed draws, normalized per output channel. The
    // wide relative spread keeps rows of a fresh operator clearly distinct
    // even at large fan-in; near-uniform rows start optimization close to a
    // permutation-symmetric manifold it escapes only slowly.
    static void row_stochastic_init(Parameter<T>& w, std::int64_t fan_in, Rng& rng) {
        T* data = w.value.mutable_data();
        const std::int64_t rows = w.value.numel() / fan_in;
        for (std::int64_t r = 0; r < rows; ++r) {
            double s = 0;
            for (std::int64_t i = 0; i < fan_in; ++i) {
                const double v = 1e-3 - std::log(1.0 - rng.unit());
                data[r * fan_in + i] = static_cast<T>(v);
                s += v;
            }
            for (std::int64_t i = 0; i < fan_in; ++i)
                data[r * fan_in + i] = static_cast<T>(static_cast<double>(data[r * fan_in + i]) / s);
        }
    }

    std::int64_t width_, group_size_, level_;
    std::unique_ptr<Conv2d<T>> restrict_, prolong_;
};

// ---------------------------------------------------------------------------
// The multigrid-in-channels block.
// ---------------------------------------------------------------------------

struct MgicConfig {
    std::int64_t s_g = 8;
    std::int64_t s_c = 8;
    BlockTemplate block;

    MgicConfig() = default;
    MgicConfig(std::int64_t sg, std::int64_t sc, BlockTemplate tpl)
        : s_g(sg), s_c(sc), block(std::move(tpl)) {
        if (s_g < 1) throw ConfigError("mgic: s_g must be >= 1");
        if (s_c < s_g) {
            throw ConfigError("mgic: s_c=" + std::to_string(s_c) + " must be >= s_g=" +
                              std::to_string(s_g));
        }
    }
};

// One V-shaped traversal of the channel hierarchy: restrictions down to the
// coarsest width, a fully-coupled template application there, then prolongated
// residual corrections and grouped relaxations on the way up.
template <typename T>
class MgicBlock : public Module<T> {
public:
    MgicBlock(std::int64_t c_in, const MgicConfig& config, Rng& rng)
        : c_in_(c_in), config_(config) {
        n_levels_ = num_levels(c_in, config.s_c);
        std::vector<std::int64_t> widths;
        std::int64_t w = c_in;
        for (std::int64_t j = 0; j < n_levels_; ++j) {
            if (w % 2 != 0) {
                throw ConfigError("mgic: level " + std::to_string(j) + " width " +
                                  std::to_string(w) + " cannot be halved");
            }
            widths.push_back(w);
            w /= 2;
        }
        coarse_width_ = w;
        s_g_eff_ = n_levels_ > 0 ? effective_group_size(config.s_g, widths) : config.s_g;
        if (n_levels_ > 0 && s_g_eff_ % 2 != 0) {
            throw ConfigError("mgic: clamped group size " + std::to_string(s_g_eff_) +
                              " is odd and cannot be halved by the transfer at level 0");
        }
        for (std::int64_t j = 0; j < n_levels_; ++j) {
            Level lvl;
            lvl.transfer = std::make_unique<TransferPair<T>>(widths[static_cast<std::size_t>(j)],
                                                             s_g_eff_, j, rng);
            try {
                lvl.relax = make_block_instance<T>(config.block, widths[static_cast<std::size_t>(j)],
                                                   s_g_eff_, rng);
            } catch (const ConfigError& e) {
                throw ConfigError("mgic: level " + std::to_string(j) + ": " + e.what());
            }
            lvl.correction_norm =
                std::make_unique<BatchNorm2d<T>>(widths[static_cast<std::size_t>(j)]);
            levels_.push_back(std::move(lvl));
        }
        coarse_ = make_block_instance<T>(config.block, coarse_width_, coarse_width_, rng);
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) override {
        if (x.rank() != 4 || x.dim(1) != c_in_) {
            throw DimensionError("mgic: expected " + std::to_string(c_in_) +
                                 " input channels, got " + shape_str(x.shape()));
        }
        std::vector<Tensor<T>> down;
        down.reserve(static_cast<std::size_t>(n_levels_) + 1);
        down.push_back(x);
        for (std::int64_t j = 0; j < n_levels_; ++j)
            down.push_back(levels_[static_cast<std::size_t>(j)].transfer->restrict_fwd(tape, down.back()));
        Tensor<T> cur = coarse_->forward(tape, down.back());
        for (std::int64_t j = n_levels_ - 1; j >= 0; --j) {
            auto& lvl = levels_[static_cast<std::size_t>(j)];
            Tensor<T> residual = ops::sub(tape, cur, down[static_cast<std::size_t>(j) + 1]);
            Tensor<T> correction =
                lvl.correction_norm->forward(tape, lvl.transfer->prolong_fwd(tape, residual));
            cur = lvl.relax->forward(tape, ops::add(tape, down[static_cast<std::size_t>(j)], correction));
        }
        return cur;
    }

    // Puts every template instance into its identity configuration and zeroes
    // the correction path, making the whole block the identity map.
    void configure_identity() {
        for (auto& lvl : levels_) {
            if (!lvl.relax->zero_residual()) {
                throw ConfigError("mgic: template has no residual branch to zero for identity");
            }
            lvl.correction_norm->set_affine(T(0), T(0));
        }
        if (!coarse_->zero_residual()) {
            throw ConfigError("mgic: template has no residual branch to zero for identity");
        }
    }

    void visit(const std::string& prefix, const typename Module<T>::ParamVisitor& on_param,
               const typename Module<T>::BufferVisitor& on_buffer) override {
        for (std::int64_t j = 0; j < n_levels_; ++j) {
            auto& lvl = levels_[static_cast<std::size_t>(j)];
            const std::string base = detail::join(prefix, "level" + std::to_string(j));
            lvl.transfer->visit(base, on_param, on_buffer);
            lvl.relax->visit(detail::join(base, "relax"), on_param, on_buffer);
            lvl.correction_norm->visit(detail::join(base, "norm"), on_param, on_buffer);
        }
        coarse_->visit(detail::join(prefix, "coarse"), on_param, on_buffer);
    }

    void set_training(bool training) override {
        for (auto& lvl : levels_) {
            lvl.relax->set_training(training);
            lvl.correction_norm->set_training(training);
        }
        coarse_->set_training(training);
    }

    NetDesc describe() const override {
        NetDesc d;
        d.kind = "mgic";
        d.attr = {{"c_in", c_in_},
                  {"s_g", config_.s_g},
                  {"s_g_eff", s_g_eff_},
                  {"s_c", config_.s_c},
                  {"n_levels", n_levels_},
                  {"coarse_width", coarse_width_}};
        for (std::int64_t j = 0; j < n_levels_; ++j) {
            const auto& lvl = levels_[static_cast<std::size_t>(j)];
            d.children.push_back(lvl.transfer->describe("transfer"));
            NetDesc r = lvl.relax->describe();
            r.name = "relax";
            d.children.push_back(std::move(r));
            NetDesc n = lvl.correction_norm->describe();
            n.name = "norm";
            d.children.push_back(std::move(n));
        }
        NetDesc c = coarse_->describe();
        c.name = "coarse";
        d.children.push_back(std::move(c));
        return d;
    }

    std::int64_t n_levels() const { return n_levels_; }
    std::int64_t c_in() const { return c_in_; }
    std::int64_t coarse_width() const { return coarse_width_; }
    std::int64_t group_size() const { return s_g_eff_; }
    const MgicConfig& config() const { return config_; }
    TransferPair<T>& transfer(std::int64_t j) { return *levels_[static_cast<std::size_t>(j)].transfer; }
    Module<T>& relaxation(std::int64_t j) { return *levels_[static_cast<std::size_t>(j)].relax; }
    BatchNorm2d<T>& correction_norm(std::int64_t j) {
        return *levels_[static_cast<std::size_t>(j)].correction_norm;
    }
    Module<T>& coarse_block() { return *coarse_; }

private:
    struct Level {
        std::unique_ptr<TransferPair<T>> transfer;
        std::unique_ptr<TemplateBlock<T>> relax;
        std::unique_ptr<BatchNorm2d<T>> correction_norm;
    };

    std::int64_t c_in_;
    MgicConfig config_;
    std::int64_t n_levels_ = 0;
    std::int64_t coarse_width_ = 0;
    std::int64_t s_g_eff_ = 0;
    std::vector<Level> levels_;
    std::unique_ptr<TemplateBlock<T>> coarse_;
};

// ---------------------------------------------------------------------------
// Channel-resolution shortcut: a cheap grouped 3x3 convolution adapting
// c_in -> c_out (groups = gcd) and optionally halving the spatial extent.
// ---------------------------------------------------------------------------

template <typename T>
class ChannelShortcut : public Module<T> {
public:
    ChannelShortcut(std::int64_t c_in, std::int64_t c_out, std::int64_t stride, Rng& rng)
        : c_in_(c_in), c_out_(c_out), stride_(stride) {
        if (stride != 1 && stride != 2) {
            throw ConfigError("shortcut: stride must be 1 or 2, got " + std::to_string(stride));
        }
        const std::int64_t groups = std::gcd(c_in, c_out);
        conv_ = std::make_unique<Conv2d<T>>(c_in, c_out, 3, stride, 1, groups, false, rng);
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) override {
        return conv_->forward(tape, x);
    }

    void visit(const std::string& prefix, const typename Module<T>::ParamVisitor& on_param,
               const typename Module<T>::BufferVisitor& on_buffer) override {
        conv_->visit(detail::join(prefix, "conv"), on_param, on_buffer);
    }

    NetDesc describe() const override {
        NetDesc d;
        d.kind = "shortcut";
        d.attr = {{"c_in", c_in_}, {"c_out", c_out_}, {"stride", stride_}};
        NetDesc c = conv_->describe();
        c.name = "conv";
        d.children = {std::move(c)};
        return d;
    }

    Conv2d<T>& conv() { return *conv_; }

private:
    std::int64_t c_in_, c_out_, stride_;
    std::unique_ptr<Conv2d<T>> conv_;
};

// ---------------------------------------------------------------------------
// Transfer-only descent/ascent chain (the channel autoencoder used by the
// reconstruction experiment: all CNN blocks and skip connections removed).
// Group sizes are capped at each level's width, so wide group settings
// degenerate to fully coupled transfers on narrow levels.
// ---------------------------------------------------------------------------

template <typename T>
class TransferChain : public Module<T> {
public:
    TransferChain(std::int64_t c_in, std::int64_t s_g, std::int64_t s_c, Rng& rng) : c_in_(c_in) {
        const std::int64_t n = num_levels(c_in, s_c);
        if (n == 0) throw ConfigError("transfer chain: hierarchy has no levels (c_in < 2*s_c)");
        std::int64_t w = c_in;
        for (std::int64_t j = 0; j < n; ++j) {
            if (w % 2 != 0) {
                throw ConfigError("transfer chain: level " + std::to_string(j) + " width " +
                                  std::to_string(w) + " cannot be halved");
            }
            std::int64_t s = effective_group_size(std::min(s_g, w), {w});
            if (s % 2 != 0) {
                throw ConfigError("transfer chain: level " + std::to_string(j) +
                                  " group size " + std::to_string(s) + " is odd");
            }
            pairs_.push_back(std::make_unique<TransferPair<T>>(w, s, j, rng));
            w /= 2;
        }
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) override {
        Tensor<T> cur = x;
        for (auto& p : pairs_) cur = p->restrict_fwd(tape, cur);
        for (auto it = pairs_.rbegin(); it != pairs_.rend(); ++it)
            cur = (*it)->prolong_fwd(tape, cur);
        return cur;
    }

    void visit(const std::string& prefix, const typename Module<T>::ParamVisitor& on_param,
               const typename Module<T>::BufferVisitor& on_buffer) override {
        for (std::size_t j = 0; j < pairs_.size(); ++j)
            pairs_[j]->visit(detail::join(prefix, "level" + std::to_string(j)), on_param, on_buffer);
    }

    NetDesc describe() const override {
        NetDesc d;
        d.kind = "transfer_chain";
        d.attr = {{"c_in", c_in_}, {"n_levels", static_cast<std::int64_t>(pairs_.size())}};
        for (const auto& p : pairs_) d.children.push_back(p->describe("transfer"));
        return d;
    }

    std::size_t depth() const { return pairs_.size(); }
    TransferPair<T>& pair(std::size_t j) { return *pairs_[j]; }

private:
    std::int64_t c_in_;
    std::vector<std::unique_ptr<TransferPair<T>>> pairs_;
};

}  // namespace mgic
