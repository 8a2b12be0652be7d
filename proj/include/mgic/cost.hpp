#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgic/layers.hpp"
#include "mgic/netdesc.hpp"

namespace mgic {

// Exact accounting for a built network. Conventions:
//   - macs: one multiply-accumulate per kernel tap per output element for
//     convolutions/linear layers; batchnorm costs 2 per element, activations
//     and residual additions 1 per element, pooling window^2 per output.
//   - flops = 2 * macs, always.
//   - train_activation: total elements of every intermediate map (all are
//     retained for backpropagation), network input included.
//   - infer_activation: peak of simultaneously live elements when maps are
//     released as soon as no later step needs them.
struct LayerCost {
    std::string name;
    std::string kind;
    std::int64_t params = 0;
    std::int64_t macs = 0;
    std::vector<std::int64_t> out_shape;
};

struct CostReport {
    std::int64_t params = 0;
    std::int64_t macs = 0;
    std::int64_t flops = 0;
    std::int64_t train_activation = 0;
    std::int64_t infer_activation = 0;
    std::vector<LayerCost> per_layer;

    nlohmann::json to_json() const;
};

// Walks a structural description with the given input shape.
CostReport analyze_cost(const NetDesc& net, const std::vector<std::int64_t>& input_shape);

// Closed-form parameter count of one MGIC block built from the plain
// conv(d)+norm+relu template, counting convolution weights only:
//   sum_{j=0}^{n-1} s_g * (c / 2^j) * (d^2 + 1)  +  s_c^2 * d^2
std::int64_t closed_form_mgic_params(std::int64_t c, std::int64_t s_g, std::int64_t s_c,
                                     std::int64_t d);

// Parameters of the fully coupled d x d baseline at width c.
inline std::int64_t fully_coupled_params(std::int64_t c, std::int64_t d) { return c * c * d * d; }

// Sum of hierarchy map widths over the level-0 width: (sum_j c/2^j) / c < 2.
double hierarchy_activation_ratio(std::int64_t c, std::int64_t s_c);

// Enumerated element count over every parameter except norm scale/shift.
template <typename T>
std::int64_t count_non_norm_params(Module<T>& m) {
    std::int64_t n = 0;
    m.visit(
        "",
        [&](const std::string&, Parameter<T>& p) {
            if (p.kind != ParamKind::NormGamma && p.kind != ParamKind::NormBeta) n += p.numel();
        },
        [](const std::string&, std::vector<T>&) {});
    return n;
}

}  // namespace mgic
