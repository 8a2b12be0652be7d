#pragma once

#include <memory>
#include <string>

#include "mgic/blocks.hpp"
#include "mgic/jsonutil.hpp"

namespace mgic {

// A network assembled from a JSON architecture description. The description
// travels with the model (checkpoints embed it verbatim) so a file is enough
// to rebuild the exact structure.
template <typename T>
struct Model {
    std::unique_ptr<Sequential<T>> net;
    json arch;

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) { return net->forward(tape, x); }
    void set_training(bool training) { net->set_training(training); }
    NetDesc describe() const { return net->describe(); }
    std::vector<std::int64_t> input_shape(std::int64_t batch) const {
        const json& in = arch.at("input");
        return {batch, in.at("channels").get<std::int64_t>(), in.at("height").get<std::int64_t>(),
                in.at("width").get<std::int64_t>()};
    }
};

namespace archdetail {

inline BlockTemplate parse_template(const json& j, const std::string& pointer) {
    validate_object(j, pointer,
                    {{"kind", SchemaField::Str, true},
                     {"d", SchemaField::Int, false},
                     {"expansion", SchemaField::Num, false},
                     {"kernels", SchemaField::Arr, false}});
    const std::string kind = j.at("kind").get<std::string>();
    const std::int64_t d = j.value("d", 3);
    if (kind == "simple") return BlockTemplate::simple_conv(d);
    if (kind == "bottleneck") return BlockTemplate::bottleneck(j.value("expansion", 0.25), d);
    if (kind == "sequence") {
        std::vector<std::int64_t> kernels;
        for (const auto& k : j.value("kernels", json::array())) kernels.push_back(k.get<std::int64_t>());
        return BlockTemplate::sequence(std::move(kernels));
    }
    throw ConfigError("config: unknown template kind '" + kind + "' at " + pointer + "/kind");
}

}  // namespace archdetail

// Builds a model from an architecture description:
//   {"input": {"channels", "height", "width"},
//    "stack": [{"op": "conv"|"mgic"|"grouped_block"|"maxpool"|"avgpool"|
//               "gap"|"flatten"|"linear", ...}, ...]}
// A channel shortcut is inserted automatically in front of any block whose
// declared width differs from the running width (or that asks for stride 2).
template <typename T>
Model<T> build_model(const json& arch, Rng& init_rng) {
    validate_object(arch, "", {{"input", SchemaField::Obj, true}, {"stack", SchemaField::Arr, true}});
    validate_object(arch.at("input"), "/input",
                    {{"channels", SchemaField::Int, true},
                     {"height", SchemaField::Int, true},
                     {"width", SchemaField::Int, true}});
    Model<T> model;
    model.arch = arch;
    model.net = std::make_unique<Sequential<T>>();
    std::int64_t width = arch.at("input").at("channels").get<std::int64_t>();
    if (width < 1) throw ConfigError("config: input channels must be >= 1 at /input/channels");
    std::size_t index = 0;
    for (const auto& stage : arch.at("stack")) {
        const std::string at = "/stack/" + std::to_string(index);
        if (!stage.is_object() || !stage.contains("op")) {
            throw ConfigError("config: stack entry must be an object with an 'op' key at " + at);
        }
        const std::string op = stage.at("op").get<std::string>();
        const std::string tag = "s" + std::to_string(index);
        if (op == "conv") {
            validate_object(stage, at,
                            {{"op", SchemaField::Str, true},
                             {"c_out", SchemaField::Int, true},
                             {"k", SchemaField::Int, false},
                             {"stride", SchemaField::Int, false},
                             {"groups", SchemaField::Int, false},
                             {"norm", SchemaField::Bool, false},
                             {"act", SchemaField::Str, false},
                             {"bias", SchemaField::Bool, false}});
            const std::int64_t c_out = stage.at("c_out").get<std::int64_t>();
            const std::int64_t k = stage.value("k", 1);
            const std::int64_t stride = stage.value("stride", 1);
            const std::int64_t groups = stage.value("groups", 1);
            const bool norm = stage.value("norm", true);
            const bool bias = stage.value("bias", !norm);
            const std::string act = stage.value("act", norm ? "relu" : "none");
            model.net->add(tag + "_conv", std::make_unique<Conv2d<T>>(width, c_out, k, stride,
                                                                      (k - 1) / 2, groups, bias,
                                                                      init_rng));
            if (norm) model.net->add(tag + "_norm", std::make_unique<BatchNorm2d<T>>(c_out));
            if (act == "relu") {
                model.net->add(tag + "_act", std::make_unique<Relu<T>>());
            } else if (act != "none") {
                throw ConfigError("config: unknown activation '" + act + "' at " + at + "/act");
            }
            width = c_out;
        } else if (op == "mgic" || op == "grouped_block") {
            validate_object(stage, at,
                            {{"op", SchemaField::Str, true},
                             {"c_out", SchemaField::Int, true},
                             {"s_g", SchemaField::Int, true},
                             {"s_c", SchemaField::Int, false},
                             {"stride", SchemaField::Int, false},
                             {"template", SchemaField::Obj, true}});
            const std::int64_t c_out = stage.at("c_out").get<std::int64_t>();
            const std::int64_t stride = stage.value("stride", 1);
            if (c_out != width || stride != 1) {
                model.net->add(tag + "_shortcut",
                               std::make_unique<ChannelShortcut<T>>(width, c_out, stride, init_rng));
                width = c_out;
            }
            BlockTemplate tpl = archdetail::parse_template(stage.at("template"), at + "/template");
            const std::int64_t s_g = stage.at("s_g").get<std::int64_t>();
            try {
                if (op == "mgic") {
                    const std::int64_t s_c = stage.value("s_c", s_g);
                    model.net->add(tag + "_mgic", std::make_unique<MgicBlock<T>>(
                                                      width, MgicConfig(s_g, s_c, tpl), init_rng));
                } else {
                    const std::int64_t s_eff = effective_group_size(std::min(s_g, width), {width});
                    model.net->add(tag + "_block", make_block_instance<T>(tpl, width, s_eff, init_rng));
                }
            } catch (const ConfigError& e) {
                throw ConfigError("config: at " + at + ": " + e.what());
            }
        } else if (op == "maxpool" || op == "avgpool") {
            validate_object(stage, at,
                            {{"op", SchemaField::Str, true},
                             {"window", SchemaField::Int, false},
                             {"stride", SchemaField::Int, false}});
            PoolSpec spec;
            spec.kind = op == "maxpool" ? PoolSpec::Kind::Max : PoolSpec::Kind::Avg;
            spec.window = stage.value("window", 2);
            spec.stride = stage.value("stride", spec.window);
            model.net->add(tag + "_pool", std::make_unique<Pool<T>>(spec));
        } else if (op == "gap") {
            validate_object(stage, at, {{"op", SchemaField::Str, true}});
            model.net->add(tag + "_gap", std::make_unique<GlobalAvgPool<T>>());
        } else if (op == "flatten") {
            validate_object(stage, at, {{"op", SchemaField::Str, true}});
            model.net->add(tag + "_flatten", std::make_unique<Flatten<T>>());
        } else if (op == "linear") {
            validate_object(stage, at,
                            {{"op", SchemaField::Str, true},
                             {"c_in", SchemaField::Int, true},
                             {"c_out", SchemaField::Int, true},
                             {"bias", SchemaField::Bool, false}});
            const std::int64_t c_in = stage.at("c_in").get<std::int64_t>();
            const std::int64_t c_out = stage.at("c_out").get<std::int64_t>();
            model.net->add(tag + "_linear",
                           std::make_unique<Linear<T>>(c_in, c_out, stage.value("bias", true), init_rng));
            width = c_out;
        } else {
            throw ConfigError("config: unknown op '" + op + "' at " + at + "/op");
        }
        ++index;
    }
    return model;
}

}  // namespace mgic
