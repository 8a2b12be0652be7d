#include "mgic/cost.hpp"

#include <numeric>

#include "mgic/blocks.hpp"
#include "mgic/errors.hpp"

namespace mgic {

namespace {

std::int64_t elems(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::vector<std::int64_t> pool_shape(const std::vector<std::int64_t>& in, std::int64_t window,
                                     std::int64_t stride) {
    if (in.size() != 4) throw DimensionError("cost: pooling expects rank-4 input");
    const std::int64_t ho = (in[2] - window) / stride + 1;
    const std::int64_t wo = (in[3] - window) / stride + 1;
    if (ho < 1 || wo < 1) throw DimensionError("cost: pooling window larger than input");
    return {in[0], in[1], ho, wo};
}

struct Walker {
    CostReport rep;

    void bump_live(std::int64_t live) {
        rep.infer_activation = std::max(rep.infer_activation, live);
    }

    void add_layer(const std::string& path, const std::string& kind, std::int64_t params,
                   std::int64_t macs, const std::vector<std::int64_t>& out) {
        rep.params += params;
        rep.macs += macs;
        rep.per_layer.push_back({path, kind, params, macs, out});
    }

    static std::string child_path(const std::string& base, const NetDesc& c, std::size_t index) {
        const std::string leaf = c.name.empty() ? c.kind + std::to_string(index) : c.name;
        return base.empty() ? leaf : base + "/" + leaf;
    }

    // `held` counts elements outer scopes keep alive while this node runs.
    // Returns the output shape.
    std::vector<std::int64_t> walk(const NetDesc& n, std::vector<std::int64_t> in,
                                   std::int64_t held, const std::string& path) {
        if (n.kind == "conv") {
            if (in.size() != 4) throw DimensionError("cost: conv expects rank-4 input at " + path);
            const std::int64_t cin = n.get("c_in"), cout = n.get("c_out"), k = n.get("k");
            const std::int64_t stride = n.get("stride"), pad = n.get("pad"), g = n.get("groups");
            if (in[1] != cin) {
                throw DimensionError("cost: conv at " + path + " expects " + std::to_string(cin) +
                                     " channels, got " + shape_str(in));
            }
            const std::int64_t ho = (in[2] + 2 * pad - k) / stride + 1;
            const std::int64_t wo = (in[3] + 2 * pad - k) / stride + 1;
            if (ho < 1 || wo < 1) throw DimensionError("cost: conv output collapsed at " + path);
            std::vector<std::int64_t> out = {in[0], cout, ho, wo};
            const std::int64_t params = cout * (cin / g) * k * k + (n.get("bias") ? cout : 0);
            const std::int64_t macs = in[0] * ho * wo * cout * (cin / g) * k * k;
            add_layer(path, "conv", params, macs, out);
            rep.train_activation += elems(out);
            bump_live(held + elems(in) + elems(out));
            return out;
        }
        if (n.kind == "batchnorm") {
            const std::int64_t m = 2 * elems(in);
            add_layer(path, "batchnorm", 2 * n.get("channels"), m, in);
            rep.train_activation += elems(in);
            bump_live(held + 2 * elems(in));
            return in;
        }
        if (n.kind == "relu") {
            add_layer(path, "relu", 0, elems(in), in);
            rep.train_activation += elems(in);
            bump_live(held + 2 * elems(in));
            return in;
        }
        if (n.kind == "maxpool" || n.kind == "avgpool") {
            auto out = pool_shape(in, n.get("window"), n.get("stride"));
            const std::int64_t w = n.get("window");
            add_layer(path, n.kind, 0, elems(out) * w * w, out);
            rep.train_activation += elems(out);
            bump_live(held + elems(in) + elems(out));
            return out;
        }
        if (n.kind == "gap") {
            if (in.size() != 4) throw DimensionError("cost: gap expects rank-4 input at " + path);
            std::vector<std::int64_t> out = {in[0], in[1]};
            add_layer(path, "gap", 0, elems(in), out);
            rep.train_activation += elems(out);
            bump_live(held + elems(in) + elems(out));
            return out;
        }
        if (n.kind == "flatten") {
            return {in[0], elems(in) / in[0]};
        }
        if (n.kind == "linear") {
            if (in.size() != 2) throw DimensionError("cost: linear expects rank-2 input at " + path);
            const std::int64_t cin = n.get("c_in"), cout = n.get("c_out");
            if (in[1] != cin) {
                throw DimensionError("cost: linear at " + path + " expects " + std::to_string(cin) +
                                     " features, got " + shape_str(in));
            }
            std::vector<std::int64_t> out = {in[0], cout};
            add_layer(path, "linear", cout * cin + (n.get("bias") ? cout : 0), in[0] * cin * cout,
                      out);
            rep.train_activation += elems(out);
            bump_live(held + elems(in) + elems(out));
            return out;
        }
        if (n.kind == "sequence" || n.kind == "sequence_block" || n.kind == "simple_block" ||
            n.kind == "shortcut") {
            std::vector<std::int64_t> cur = std::move(in);
            for (std::size_t i = 0; i < n.children.size(); ++i)
                cur = walk(n.children[i], cur, held, child_path(path, n.children[i], i));
            return cur;
        }
        if (n.kind == "bottleneck") {
            // Input is held across the residual branch until the final add.
            std::vector<std::int64_t> cur = in;
            for (std::size_t i = 0; i < n.children.size(); ++i)
                cur = walk(n.children[i], cur, held + elems(in), child_path(path, n.children[i], i));
            if (cur != in) throw DimensionError("cost: bottleneck branch changed shape at " + path);
            add_layer(path + "/residual_add", "add", 0, elems(in), in);
            rep.train_activation += elems(in);
            bump_live(held + 3 * elems(in));
            return in;
        }
        if (n.kind == "transfer_pair") {
            throw ConfigError("cost: transfer_pair outside an mgic block at " + path);
        }
        if (n.kind == "mgic") {
            return walk_mgic(n, std::move(in), held, path);
        }
        if (n.kind == "transfer_chain") {
            std::vector<std::int64_t> cur = in;
            for (std::size_t j = 0; j < n.children.size(); ++j)
                cur = walk(n.children[j].children[0], cur, held,
                           path + "/level" + std::to_string(j) + "/R");
            for (std::size_t j = n.children.size(); j-- > 0;)
                cur = walk(n.children[j].children[1], cur, held,
                           path + "/level" + std::to_string(j) + "/P");
            return cur;
        }
        throw ConfigError("cost: unknown layer kind '" + n.kind + "' at " + path);
    }

    std::vector<std::int64_t> walk_mgic(const NetDesc& n, std::vector<std::int64_t> in,
                                        std::int64_t held, const std::string& path) {
        const std::int64_t levels = n.get("n_levels");
        std::vector<std::vector<std::int64_t>> down_shape;
        down_shape.push_back(in);
        // Descent: every down map stays alive until its ascent step.
        std::int64_t held_down = 0;
        for (std::int64_t j = 0; j < levels; ++j) {
            const NetDesc& pair = n.children[static_cast<std::size_t>(3 * j)];
            auto out = walk(pair.children[0], down_shape.back(), held + held_down,
                            path + "/level" + std::to_string(j) + "/R");
            held_down += elems(down_shape.back());
            down_shape.push_back(out);
        }
        // Coarse fully-coupled block; all shallower down maps are held.
        std::vector<std::int64_t> cur =
            walk(n.children.back(), down_shape.back(), held + held_down, path + "/coarse");
        // Ascent.
        for (std::int64_t j = levels - 1; j >= 0; --j) {
            const std::string base = path + "/level" + std::to_string(j);
            const NetDesc& pair = n.children[static_cast<std::size_t>(3 * j)];
            const NetDesc& relax = n.children[static_cast<std::size_t>(3 * j + 1)];
            const NetDesc& norm = n.children[static_cast<std::size_t>(3 * j + 2)];
            held_down -= elems(down_shape[static_cast<std::size_t>(j)]);
            const std::int64_t held_j = held + held_down + elems(down_shape[static_cast<std::size_t>(j)]);
            const std::int64_t fine = elems(down_shape[static_cast<std::size_t>(j)]);
            const std::int64_t coarse = elems(down_shape[static_cast<std::size_t>(j) + 1]);
            // residual = cur - down[j+1]
            add_layer(base + "/residual_sub", "sub", 0, coarse, down_shape[static_cast<std::size_t>(j) + 1]);
            rep.train_activation += coarse;
            bump_live(held_j + 3 * coarse);
            // prolong + norm on the correction path
            auto up = walk(pair.children[1], down_shape[static_cast<std::size_t>(j) + 1], held_j,
                           base + "/P");
            walk(norm, up, held_j, base + "/norm");
            add_layer(base + "/correction_add", "add", 0, fine, down_shape[static_cast<std::size_t>(j)]);
            rep.train_activation += fine;
            bump_live(held_j + 2 * fine);
            cur = walk(relax, down_shape[static_cast<std::size_t>(j)], held + held_down,
                       base + "/relax");
        }
        return cur;
    }
};

}  // namespace

CostReport analyze_cost(const NetDesc& net, const std::vector<std::int64_t>& input_shape) {
    Walker w;
    w.rep.train_activation = elems(input_shape);
    w.rep.infer_activation = elems(input_shape);
    w.walk(net, input_shape, 0, net.name.empty() ? net.kind : net.name);
    w.rep.flops = 2 * w.rep.macs;
    return w.rep;
}

std::int64_t closed_form_mgic_params(std::int64_t c, std::int64_t s_g, std::int64_t s_c,
                                     std::int64_t d) {
    const std::int64_t n = num_levels(c, s_c);
    std::int64_t total = s_c * s_c * d * d;
    std::int64_t width = c;
    for (std::int64_t j = 0; j < n; ++j) {
        if (width % s_g != 0) {
            throw ConfigError("closed form: s_g=" + std::to_string(s_g) +
                              " does not divide level " + std::to_string(j) + " width " +
                              std::to_string(width));
        }
        if (width % 2 != 0) {
            throw ConfigError("closed form: level " + std::to_string(j) + " width " +
                              std::to_string(width) + " cannot be halved");
        }
        total += s_g * width * (d * d + 1);
        width /= 2;
    }
    return total;
}

double hierarchy_activation_ratio(std::int64_t c, std::int64_t s_c) {
    const std::int64_t n = num_levels(c, s_c);
    std::int64_t sum = 0;
    std::int64_t width = c;
    for (std::int64_t j = 0; j <= n; ++j) {
        sum += width;
        width /= 2;
    }
    return static_cast<double>(sum) / static_cast<double>(c);
}

nlohmann::json CostReport::to_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : per_layer) {
        layers.push_back({{"name", l.name},
                          {"kind", l.kind},
                          {"params", l.params},
                          {"macs", l.macs},
                          {"out_shape", l.out_shape}});
    }
    return {{"params", params},
            {"macs", macs},
            {"flops", flops},
            {"train_activation", train_activation},
            {"infer_activation", infer_activation},
            {"per_layer", layers}};
}

}  // namespace mgic
