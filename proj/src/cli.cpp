#include "mgic/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include "mgic/check_registry.hpp"
#include "mgic/checkpoint.hpp"
#include "mgic/cost.hpp"
#include "mgic/csv.hpp"
#include "mgic/data.hpp"
#include "mgic/idx.hpp"
#include "mgic/train.hpp"

namespace mgic::cli {

namespace {

namespace fs = std::filesystem;

std::string out_path(const std::string& out_dir, const std::string& file) {
    fs::create_directories(out_dir);
    return (fs::path(out_dir) / file).string();
}

std::string config_hash(const json& config) { return hex64(fnv1a64(config.dump())); }

void write_json(const std::string& path, const json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f << j.dump(2) << "\n";
}

json template_json(const json& config, const char* key, const json& fallback) {
    return config.contains(key) ? config.at(key) : fallback;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

json analyze_block(const json& block_cfg, const json& input_cfg, const json& sweep) {
    validate_object(block_cfg, "/block",
                    {{"c", SchemaField::Int, true},
                     {"s_g", SchemaField::Int, true},
                     {"s_c", SchemaField::Int, true},
                     {"template", SchemaField::Obj, false}});
    const std::int64_t c = block_cfg.at("c").get<std::int64_t>();
    const std::int64_t s_g = block_cfg.at("s_g").get<std::int64_t>();
    const std::int64_t s_c = block_cfg.at("s_c").get<std::int64_t>();
    const json tpl_json = template_json(block_cfg, "template", {{"kind", "simple"}, {"d", 3}});
    BlockTemplate tpl = archdetail::parse_template(tpl_json, "/block/template");
    const std::int64_t d = tpl.d;

    Rng rng(0);
    MgicBlock<float> block(c, MgicConfig(s_g, s_c, tpl), rng);
    const std::int64_t batch = input_cfg.value("batch", 1);
    const std::int64_t h = input_cfg.value("height", 7);
    const std::int64_t w = input_cfg.value("width", 7);
    CostReport cost = analyze_cost(block.describe(), {batch, c, h, w});

    json out;
    out["cost"] = cost.to_json();
    out["params_total"] = count_params(block);
    out["params_conv"] = count_non_norm_params(block);
    out["baseline_params"] = fully_coupled_params(c, d);
    out["param_ratio"] =
        static_cast<double>(count_non_norm_params(block)) / static_cast<double>(fully_coupled_params(c, d));
    out["hierarchy_activation_ratio"] = hierarchy_activation_ratio(c, s_c);
    out["n_levels"] = block.n_levels();
    out["s_g_effective"] = block.group_size();
    if (tpl.kind == BlockTemplate::Kind::SimpleConv) {
        out["closed_form_params"] = closed_form_mgic_params(c, block.group_size(), s_c, d);
    }
    if (sweep.is_array() && !sweep.empty()) {
        json rows = json::array();
        for (const auto& cw : sweep) {
            const std::int64_t cc = cw.get<std::int64_t>();
            rows.push_back({{"c", cc},
                            {"closed_form_params", closed_form_mgic_params(cc, s_g, s_c, d)},
                            {"baseline_params", fully_coupled_params(cc, d)}});
        }
        out["sweep"] = rows;
    }
    return out;
}

void print_analyze_table(const json& report) {
    const auto& cost = report.at("cost");
    std::cout << "params        " << cost.at("params").get<std::int64_t>() << "\n";
    std::cout << "macs          " << cost.at("macs").get<std::int64_t>() << "\n";
    std::cout << "flops         " << cost.at("flops").get<std::int64_t>() << "\n";
    std::cout << "act (train)   " << cost.at("train_activation").get<std::int64_t>() << "\n";
    std::cout << "act (infer)   " << cost.at("infer_activation").get<std::int64_t>() << "\n";
    if (report.contains("params_conv")) {
        std::cout << "conv params   " << report.at("params_conv").get<std::int64_t>() << "\n";
    }
    if (report.contains("closed_form_params")) {
        std::cout << "closed form   " << report.at("closed_form_params").get<std::int64_t>() << "\n";
    }
    if (report.contains("baseline_params")) {
        std::cout << "baseline      " << report.at("baseline_params").get<std::int64_t>() << "\n";
        std::cout << "param ratio   " << format_number(report.at("param_ratio").get<double>())
                  << "\n";
    }
    if (report.contains("sweep")) {
        std::cout << "width sweep (c, mgic, baseline):\n";
        for (const auto& row : report.at("sweep")) {
            std::cout << "  " << row.at("c").get<std::int64_t>() << "  "
                      << row.at("closed_form_params").get<std::int64_t>() << "  "
                      << row.at("baseline_params").get<std::int64_t>() << "\n";
        }
    }
}

// ---------------------------------------------------------------------------
// approx: implicit function regression on f(x, y) = cos(x) sin(20 y).
// ---------------------------------------------------------------------------

struct ApproxSettings {
    double alpha = 0.6;
    std::int64_t s_g = 8, s_c = 8;
    std::string block = "mgic";  // or "grouped"
    std::int64_t n_points = 10000, eval_points = 2000;
    std::int64_t epochs = 200, batch_size = 128;
    double lr = 1e-4, momentum = 0.9, weight_decay = 0.0;
    std::uint64_t seed = 1;
    std::int64_t head_width = 2;
    bool save_model = true;
};

ApproxSettings parse_approx(const json& config) {
    validate_object(config, "",
                    {{"alpha", SchemaField::Num, false},
                     {"s_g", SchemaField::Int, false},
                     {"s_c", SchemaField::Int, false},
                     {"block", SchemaField::Str, false},
                     {"n_points", SchemaField::Int, false},
                     {"eval_points", SchemaField::Int, false},
                     {"epochs", SchemaField::Int, false},
                     {"batch_size", SchemaField::Int, false},
                     {"lr", SchemaField::Num, false},
                     {"momentum", SchemaField::Num, false},
                     {"weight_decay", SchemaField::Num, false},
                     {"seed", SchemaField::Int, false},
                     {"head_width", SchemaField::Int, false},
                     {"save_checkpoint", SchemaField::Bool, false}});
    ApproxSettings s;
    s.alpha = config.value("alpha", s.alpha);
    s.s_g = config.value("s_g", s.s_g);
    s.s_c = config.value("s_c", s.s_c);
    s.block = config.value("block", s.block);
    s.n_points = config.value("n_points", s.n_points);
    s.eval_points = config.value("eval_points", s.eval_points);
    s.epochs = config.value("epochs", s.epochs);
    s.batch_size = config.value("batch_size", s.batch_size);
    s.lr = config.value("lr", s.lr);
    s.momentum = config.value("momentum", s.momentum);
    s.weight_decay = config.value("weight_decay", s.weight_decay);
    s.seed = config.value("seed", s.seed);
    s.head_width = config.value("head_width", s.head_width);
    s.save_model = config.value("save_checkpoint", s.save_model);
    if (s.block != "mgic" && s.block != "grouped") {
        throw ConfigError("config: block must be 'mgic' or 'grouped' at /block");
    }
    if (s.head_width < 1) throw ConfigError("config: head_width must be >= 1 at /head_width");
    return s;
}

// Parameter-matches a single grouped bottleneck against the full MGIC block at
// the same width (closest total parameter count; ties widen the group).
std::int64_t matched_group_size(std::int64_t width, const ApproxSettings& s) {
    Rng probe(0);
    MgicBlock<float> reference(width, MgicConfig(s.s_g, s.s_c, BlockTemplate::bottleneck(2.0, 1)),
                               probe);
    const std::int64_t target = count_params(reference);
    std::int64_t best = width;
    std::int64_t best_diff = -1;
    for (std::int64_t cand = 2; cand <= width; ++cand) {
        if (width % cand != 0) continue;
        Rng r(0);
        BottleneckBlock<float> block(width, cand, 2.0, 1, r);
        const std::int64_t diff = std::abs(count_params(block) - target);
        if (best_diff < 0 || diff < best_diff || (diff == best_diff && cand > best)) {
            best = cand;
            best_diff = diff;
        }
    }
    return best;
}

json approx_arch(std::int64_t width, const ApproxSettings& s, std::int64_t group_size) {
    json block;
    if (s.block == "mgic") {
        block = {{"op", "mgic"},
                 {"c_out", width},
                 {"s_g", s.s_g},
                 {"s_c", s.s_c},
                 {"template", {{"kind", "bottleneck"}, {"expansion", 2.0}, {"d", 1}}}};
    } else {
        block = {{"op", "grouped_block"},
                 {"c_out", width},
                 {"s_g", group_size},
                 {"template", {{"kind", "bottleneck"}, {"expansion", 2.0}, {"d", 1}}}};
    }
    return {{"input", {{"channels", 2}, {"height", 1}, {"width", 1}}},
            {"stack",
             {{{"op", "conv"}, {"c_out", 16}, {"k", 1}},
              block,
              block,
              {{"op", "conv"}, {"c_out", 64}, {"k", 1}},
              {{"op", "conv"},
               {"c_out", s.head_width},
               {"k", 1},
               {"norm", false},
               {"act", "none"},
               {"bias", true}}}}};
}

double eval_regression_mse(Model<float>& model, const DatasetHandle<float>& data,
                           std::int64_t begin, std::int64_t end, std::int64_t head_width) {
    model.set_training(false);
    double se = 0;
    std::int64_t count = 0;
    for (std::int64_t start = begin; start < end; start += 512) {
        const std::int64_t stop = std::min(end, start + 512);
        std::vector<std::int64_t> idx(static_cast<std::size_t>(stop - start));
        std::iota(idx.begin(), idx.end(), start);
        Tensor<float> in = gather_rows(data.inputs, idx);
        Tensor<float> tgt = gather_rows(data.targets, idx);
        Tape<float> tape;
        Tensor<float> x = tape.leaf(in.reshaped({in.dim(0), in.dim(1), 1, 1}), false);
        Tensor<float> y = model.forward(tape, x);
        Tensor<float> flat = ops::reshape(tape, y, {y.dim(0), y.dim(1)});
        if (head_width > 1) flat = ops::slice_cols(tape, flat, 1);
        for (std::int64_t i = 0; i < flat.dim(0); ++i) {
            const double d = static_cast<double>(flat.data()[i]) - static_cast<double>(tgt.data()[i]);
            se += d * d;
            ++count;
        }
    }
    return se / static_cast<double>(count);
}

struct ApproxOutcome {
    TrainHistory history;
    double epoch0_mse = 0, final_mse = 0;
    std::int64_t params = 0, macs = 0;
    std::int64_t width = 0, matched_s_g = 0;
    Model<float> model;
};

ApproxOutcome run_approx(const ApproxSettings& s) {
    const std::int64_t width = static_cast<std::int64_t>(std::llround(s.alpha * 160.0));
    std::int64_t matched = 0;
    if (s.block == "grouped") matched = matched_group_size(width, s);
    const json arch = approx_arch(width, s, matched);
    Rng init = Rng(s.seed).stream(kInitStream);
    ApproxOutcome out;
    out.model = build_model<float>(arch, init);
    out.width = width;
    out.matched_s_g = matched;

    DatasetHandle<float> all = sample_function_dataset<float>(s.n_points + s.eval_points, s.seed);
    const std::int64_t n_train = s.n_points;
    const std::int64_t n_total = s.n_points + s.eval_points;

    SgdConfig cfg;
    cfg.lr = s.lr;
    cfg.momentum = s.momentum;
    cfg.weight_decay = s.weight_decay;
    cfg.schedule = SgdConfig::Schedule::Constant;
    cfg.epochs = s.epochs;
    cfg.batch_size = s.batch_size;
    cfg.seed = s.seed;

    auto batch_loss = [&](Tape<float>& tape, const std::vector<std::int64_t>& idx) {
        Tensor<float> in = gather_rows(all.inputs, idx);
        Tensor<float> tgt = gather_rows(all.targets, idx);
        Tensor<float> x = tape.leaf(in.reshaped({in.dim(0), in.dim(1), 1, 1}), false);
        Tensor<float> y = out.model.forward(tape, x);
        Tensor<float> flat = ops::reshape(tape, y, {y.dim(0), y.dim(1)});
        if (s.head_width > 1) flat = ops::slice_cols(tape, flat, 1);
        return ops::mse(tape, flat, tgt);
    };
    auto evaluate = [&] { return eval_regression_mse(out.model, all, n_train, n_total, s.head_width); };

    out.epoch0_mse = evaluate();
    out.history = train_loop<float>(*out.model.net, n_train, cfg, batch_loss, evaluate);
    out.final_mse = out.history.rows.empty() ? out.epoch0_mse : out.history.rows.back().eval_metric;
    out.params = count_params(*out.model.net);
    out.macs = analyze_cost(out.model.describe(), out.model.input_shape(1)).macs;
    return out;
}

// ---------------------------------------------------------------------------
// classify: small image classifier over IDX files.
// ---------------------------------------------------------------------------

struct ClassifySettings {
    std::string train_images, train_labels, test_images, test_labels;
    std::string arch = "mgic";  // or "control"
    std::int64_t width = 32, s_g = 4, s_c = 4, classes = 10;
    std::int64_t epochs = 3, batch_size = 64, limit = 0;
    double lr = 0.02, momentum = 0.9, weight_decay = 1e-4;
    std::string schedule = "constant";
    std::uint64_t seed = 1;
};

ClassifySettings parse_classify(const json& config) {
    validate_object(config, "",
                    {{"train_images", SchemaField::Str, true},
                     {"train_labels", SchemaField::Str, true},
                     {"test_images", SchemaField::Str, true},
                     {"test_labels", SchemaField::Str, true},
                     {"arch", SchemaField::Str, false},
                     {"width", SchemaField::Int, false},
                     {"s_g", SchemaField::Int, false},
                     {"s_c", SchemaField::Int, false},
                     {"classes", SchemaField::Int, false},
                     {"epochs", SchemaField::Int, false},
                     {"batch_size", SchemaField::Int, false},
                     {"limit", SchemaField::Int, false},
                     {"lr", SchemaField::Num, false},
                     {"momentum", SchemaField::Num, false},
                     {"weight_decay", SchemaField::Num, false},
                     {"schedule", SchemaField::Str, false},
                     {"seed", SchemaField::Int, false}});
    ClassifySettings s;
    s.train_images = config.at("train_images").get<std::string>();
    s.train_labels = config.at("train_labels").get<std::string>();
    s.test_images = config.at("test_images").get<std::string>();
    s.test_labels = config.at("test_labels").get<std::string>();
    s.arch = config.value("arch", s.arch);
    s.width = config.value("width", s.width);
    s.s_g = config.value("s_g", s.s_g);
    s.s_c = config.value("s_c", s.s_c);
    s.classes = config.value("classes", s.classes);
    s.epochs = config.value("epochs", s.epochs);
    s.batch_size = config.value("batch_size", s.batch_size);
    s.limit = config.value("limit", s.limit);
    s.lr = config.value("lr", s.lr);
    s.momentum = config.value("momentum", s.momentum);
    s.weight_decay = config.value("weight_decay", s.weight_decay);
    s.schedule = config.value("schedule", s.schedule);
    s.seed = config.value("seed", s.seed);
    if (s.arch != "mgic" && s.arch != "control") {
        throw ConfigError("config: arch must be 'mgic' or 'control' at /arch");
    }
    if (s.schedule != "constant" && s.schedule != "step30") {
        throw ConfigError("config: schedule must be 'constant' or 'step30' at /schedule");
    }
    return s;
}

json classify_arch(const ClassifySettings& s) {
    json block;
    if (s.arch == "mgic") {
        block = {{"op", "mgic"},
                 {"c_out", s.width},
                 {"s_g", s.s_g},
                 {"s_c", s.s_c},
                 {"template", {{"kind", "simple"}, {"d", 3}}}};
    } else {
        block = {{"op", "grouped_block"},
                 {"c_out", s.width},
                 {"s_g", s.width},  // fully coupled control
                 {"template", {{"kind", "simple"}, {"d", 3}}}};
    }
    return {{"input", {{"channels", 1}, {"height", 28}, {"width", 28}}},
            {"stack",
             {{{"op", "conv"}, {"c_out", 16}, {"k", 3}},
              {{"op", "maxpool"}, {"window", 2}},
              block,
              {{"op", "maxpool"}, {"window", 2}},
              block,
              {{"op", "gap"}},
              {{"op", "linear"}, {"c_in", s.width}, {"c_out", s.classes}}}}};
}

std::vector<int> to_labels(const Tensor<float>& t, std::int64_t classes, const std::string& path) {
    std::vector<int> labels(static_cast<std::size_t>(t.numel()));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const int v = static_cast<int>(t.data()[i]);
        if (v < 0 || v >= classes) {
            throw ConfigError("classify: label " + std::to_string(v) + " in " + path +
                              " outside [0, " + std::to_string(classes) + ")");
        }
        labels[static_cast<std::size_t>(i)] = v;
    }
    return labels;
}

double eval_accuracy(Model<float>& model, const Tensor<float>& images,
                     const std::vector<int>& labels) {
    model.set_training(false);
    const std::int64_t n = images.dim(0);
    std::int64_t hits = 0;
    for (std::int64_t start = 0; start < n; start += 256) {
        const std::int64_t stop = std::min(n, start + 256);
        std::vector<std::int64_t> idx(static_cast<std::size_t>(stop - start));
        std::iota(idx.begin(), idx.end(), start);
        Tensor<float> in = gather_rows(images, idx);
        Tape<float> tape;
        Tensor<float> logits = model.forward(tape, tape.leaf(in, false));
        const std::int64_t k = logits.dim(1);
        for (std::int64_t i = 0; i < logits.dim(0); ++i) {
            std::int64_t best = 0;
            for (std::int64_t j = 1; j < k; ++j)
                if (logits.data()[i * k + j] > logits.data()[i * k + best]) best = j;
            if (static_cast<int>(best) == labels[static_cast<std::size_t>(start + i)]) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

struct ClassifyOutcome {
    TrainHistory history;
    double final_accuracy = 0;
    std::int64_t params = 0, macs = 0;
    Model<float> model;
};

ClassifyOutcome run_classify(const ClassifySettings& s) {
    Tensor<float> train_images = load_idx<float>(s.train_images);
    std::vector<int> train_labels =
        to_labels(load_idx<float>(s.train_labels), s.classes, s.train_labels);
    Tensor<float> test_images = load_idx<float>(s.test_images);
    std::vector<int> test_labels =
        to_labels(load_idx<float>(s.test_labels), s.classes, s.test_labels);
    if (train_images.dim(0) != static_cast<std::int64_t>(train_labels.size())) {
        throw ConfigError("classify: image/label count mismatch in training set");
    }
    std::int64_t n_train = train_images.dim(0);
    if (s.limit > 0) n_train = std::min(n_train, s.limit);

    json arch = classify_arch(s);
    arch["input"]["height"] = train_images.dim(2);
    arch["input"]["width"] = train_images.dim(3);
    Rng init = Rng(s.seed).stream(kInitStream);
    ClassifyOutcome out;
    out.model = build_model<float>(arch, init);

    SgdConfig cfg;
    cfg.lr = s.lr;
    cfg.momentum = s.momentum;
    cfg.weight_decay = s.weight_decay;
    cfg.schedule = s.schedule == "step30" ? SgdConfig::Schedule::StepDiv10Every30
                                          : SgdConfig::Schedule::Constant;
    cfg.epochs = s.epochs;
    cfg.batch_size = s.batch_size;
    cfg.seed = s.seed;

    auto batch_loss = [&](Tape<float>& tape, const std::vector<std::int64_t>& idx) {
        Tensor<float> in = gather_rows(train_images, idx);
        std::vector<int> lbl(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i)
            lbl[i] = train_labels[static_cast<std::size_t>(idx[i])];
        Tensor<float> logits = out.model.forward(tape, tape.leaf(in, false));
        return ops::softmax_cross_entropy(tape, logits, lbl);
    };
    auto evaluate = [&] { return eval_accuracy(out.model, test_images, test_labels); };

    out.history = train_loop<float>(*out.model.net, n_train, cfg, batch_loss, evaluate);
    out.final_accuracy = out.history.rows.empty() ? 0.0 : out.history.rows.back().eval_metric;
    out.params = count_params(*out.model.net);
    out.macs = analyze_cost(out.model.describe(), out.model.input_shape(1)).macs;
    return out;
}

// ---------------------------------------------------------------------------
// reconstruct: transfer-only channel autoencoder over the synthetic corpus.
// ---------------------------------------------------------------------------

struct ReconstructSettings {
    std::int64_t channels = 64, s_c = 8;
    std::vector<std::int64_t> s_g_list = {4, 8, 16, 32};
    std::int64_t n = 64, height = 8, width = 8, rank = 0;
    std::int64_t epochs = 1000, batch_size = 8;
    double lr = 0.2, momentum = 0.9;
    std::uint64_t seed = 1;
};

ReconstructSettings parse_reconstruct(const json& config) {
    validate_object(config, "",
                    {{"channels", SchemaField::Int, false},
                     {"s_c", SchemaField::Int, false},
                     {"s_g_list", SchemaField::Arr, false},
                     {"n", SchemaField::Int, false},
                     {"height", SchemaField::Int, false},
                     {"width", SchemaField::Int, false},
                     {"rank", SchemaField::Int, false},
                     {"epochs", SchemaField::Int, false},
                     {"batch_size", SchemaField::Int, false},
                     {"lr", SchemaField::Num, false},
                     {"momentum", SchemaField::Num, false},
                     {"seed", SchemaField::Int, false}});
    ReconstructSettings s;
    s.channels = config.value("channels", s.channels);
    s.s_c = config.value("s_c", s.s_c);
    if (config.contains("s_g_list")) {
        s.s_g_list.clear();
        for (const auto& v : config.at("s_g_list")) s.s_g_list.push_back(v.get<std::int64_t>());
    }
    s.n = config.value("n", s.n);
    s.height = config.value("height", s.height);
    s.width = config.value("width", s.width);
    s.rank = config.value("rank", s.rank);
    s.epochs = config.value("epochs", s.epochs);
    s.batch_size = config.value("batch_size", s.batch_size);
    s.lr = config.value("lr", s.lr);
    s.momentum = config.value("momentum", s.momentum);
    s.seed = config.value("seed", s.seed);
    return s;
}

struct ReconstructRow {
    std::int64_t s_g, params;
    double final_mse;
};

double corpus_mse(Module<float>& chain, const DatasetHandle<float>& corpus) {
    double se = 0;
    std::int64_t count = 0;
    const std::int64_t n = corpus.inputs.dim(0);
    for (std::int64_t start = 0; start < n; start += 64) {
        const std::int64_t stop = std::min(n, start + 64);
        std::vector<std::int64_t> idx(static_cast<std::size_t>(stop - start));
        std::iota(idx.begin(), idx.end(), start);
        Tensor<float> in = gather_rows(corpus.inputs, idx);
        Tape<float> tape;
        Tensor<float> y = chain.forward(tape, tape.leaf(in, false));
        for (std::int64_t i = 0; i < y.numel(); ++i) {
            const double d = static_cast<double>(y.data()[i]) - static_cast<double>(in.data()[i]);
            se += d * d;
            ++count;
        }
    }
    return se / static_cast<double>(count);
}

std::vector<ReconstructRow> run_reconstruct_rows(const ReconstructSettings& s) {
    DatasetHandle<float> corpus =
        synth_feature_maps<float>(s.n, s.channels, s.height, s.width, s.seed, s.rank);
    std::vector<ReconstructRow> rows;
    for (std::int64_t s_g : s.s_g_list) {
        Rng init = Rng(s.seed ^ static_cast<std::uint64_t>(s_g * 7919)).stream(kInitStream);
        TransferChain<float> chain(s.channels, s_g, s.s_c, init);
        SgdConfig cfg;
        cfg.lr = s.lr;
        cfg.momentum = s.momentum;
        cfg.weight_decay = 0.0;
        cfg.epochs = s.epochs;
        cfg.batch_size = s.batch_size;
        cfg.seed = s.seed;
        auto batch_loss = [&](Tape<float>& tape, const std::vector<std::int64_t>& idx) {
            Tensor<float> in = gather_rows(corpus.inputs, idx);
            Tensor<float> x = tape.leaf(in, false);
            return ops::mse(tape, chain.forward(tape, x), in);
        };
        auto evaluate = [&] { return corpus_mse(chain, corpus); };
        TrainHistory hist = train_loop<float>(chain, s.n, cfg, batch_loss, evaluate);
        if (hist.diverged) {
            throw NumericalError("reconstruct: training diverged at s_g=" + std::to_string(s_g) +
                                 " after epoch " + std::to_string(hist.last_good_epoch));
        }
        rows.push_back({s_g, count_params(chain), corpus_mse(chain, corpus)});
    }
    return rows;
}

}  // namespace

// ---------------------------------------------------------------------------
// Command wrappers.
// ---------------------------------------------------------------------------

int cmd_analyze(const json& config, const std::string& out_dir) {
    validate_object(config, "",
                    {{"block", SchemaField::Obj, false},
                     {"network", SchemaField::Obj, false},
                     {"checkpoint", SchemaField::Str, false},
                     {"input", SchemaField::Obj, false},
                     {"sweep_widths", SchemaField::Arr, false},
                     {"seed", SchemaField::Int, false}});
    const json input_cfg = template_json(config, "input", json::object());
    if (!input_cfg.is_object()) throw ConfigError("config: wrong type at /input");
    if (!input_cfg.empty()) {
        validate_object(input_cfg, "/input",
                        {{"batch", SchemaField::Int, false},
                         {"height", SchemaField::Int, false},
                         {"width", SchemaField::Int, false}});
    }
    json report;
    if (config.contains("block")) {
        report = analyze_block(config.at("block"), input_cfg,
                               template_json(config, "sweep_widths", json::array()));
    } else if (config.contains("network") || config.contains("checkpoint")) {
        json arch;
        if (config.contains("network")) {
            arch = config.at("network");
        } else {
            arch = checkpoint_arch(config.at("checkpoint").get<std::string>());
        }
        Rng rng(0);
        Model<float> model = build_model<float>(arch, rng);
        std::vector<std::int64_t> shape = model.input_shape(input_cfg.value("batch", 1));
        CostReport cost = analyze_cost(model.describe(), shape);
        report["cost"] = cost.to_json();
        report["params_total"] = count_params(*model.net);
        report["params_conv"] = count_non_norm_params(*model.net);
    } else {
        throw ConfigError("config: analyze needs one of /block, /network or /checkpoint");
    }
    write_json(out_path(out_dir, "cost.json"), report);
    print_analyze_table(report);
    return 0;
}

int cmd_approx(const json& config, const std::string& out_dir) {
    ApproxSettings s = parse_approx(config);
    ApproxOutcome out = run_approx(s);

    CsvWriter csv(out_path(out_dir, "history.csv"));
    csv.header({"epoch", "train_mse", "eval_mse"});
    for (const auto& row : out.history.rows) {
        csv.row({std::to_string(row.epoch), format_number(row.train_loss),
                 format_number(row.eval_metric)});
    }
    csv.metadata(s.seed, config_hash(config),
                 {{"head-width", std::to_string(s.head_width)},
                  {"block", s.block},
                  {"alpha", format_number(s.alpha)}});
    csv.write();

    json result = {{"block", s.block},
                   {"width", out.width},
                   {"params", out.params},
                   {"macs", out.macs},
                   {"epoch0_eval_mse", out.epoch0_mse},
                   {"final_eval_mse", out.final_mse},
                   {"head_width", s.head_width},
                   {"diverged", out.history.diverged}};
    if (s.block == "grouped") result["matched_s_g"] = out.matched_s_g;
    write_json(out_path(out_dir, "result.json"), result);
    if (s.save_model) save_checkpoint(out.model, out_path(out_dir, "model.ckpt"));
    std::cout << "approx " << s.block << ": params=" << out.params
              << " epoch0_mse=" << format_number(out.epoch0_mse)
              << " final_mse=" << format_number(out.final_mse) << "\n";
    if (out.history.diverged) {
        std::cerr << "approx: training diverged after epoch " << out.history.last_good_epoch
                  << "\n";
        return 2;
    }
    return 0;
}

int cmd_reconstruct(const json& config, const std::string& out_dir) {
    ReconstructSettings s = parse_reconstruct(config);
    auto rows = run_reconstruct_rows(s);
    CsvWriter csv(out_path(out_dir, "reconstruct.csv"));
    csv.header({"s_g", "param_count", "final_mse"});
    for (const auto& r : rows)
        csv.row({std::to_string(r.s_g), std::to_string(r.params), format_number(r.final_mse)});
    csv.metadata(s.seed, config_hash(config),
                 {{"lr", format_number(s.lr)}, {"epochs", std::to_string(s.epochs)}});
    csv.write();
    for (const auto& r : rows) {
        std::cout << "s_g=" << r.s_g << " params=" << r.params
                  << " mse=" << format_number(r.final_mse) << "\n";
    }
    return 0;
}

int cmd_classify(const json& config, const std::string& out_dir) {
    ClassifySettings s = parse_classify(config);
    ClassifyOutcome out = run_classify(s);
    CsvWriter csv(out_path(out_dir, "accuracy.csv"));
    csv.header({"epoch", "train_loss", "test_accuracy"});
    for (const auto& row : out.history.rows) {
        csv.row({std::to_string(row.epoch), format_number(row.train_loss),
                 format_number(row.eval_metric)});
    }
    csv.metadata(s.seed, config_hash(config), {{"arch", s.arch}});
    csv.write();
    write_json(out_path(out_dir, "result.json"),
               {{"arch", s.arch},
                {"params", out.params},
                {"macs", out.macs},
                {"final_accuracy", out.final_accuracy},
                {"diverged", out.history.diverged}});
    std::cout << "classify " << s.arch << ": params=" << out.params
              << " accuracy=" << format_number(out.final_accuracy) << "\n";
    if (out.history.diverged) {
        std::cerr << "classify: training diverged after epoch " << out.history.last_good_epoch
                  << "\n";
        return 2;
    }
    return 0;
}

int cmd_gradcheck(const json& config, const std::string& out_dir) {
    (void)out_dir;
    validate_object(config, "",
                    {{"seed", SchemaField::Int, false},
                     {"tolerance", SchemaField::Num, false},
                     {"trials", SchemaField::Int, false}});
    const std::uint64_t seed = config.value("seed", 7);
    const double tolerance = config.value("tolerance", 1e-4);
    const std::int64_t trials = config.value("trials", 1);
    auto results = run_gradcheck_cases(standard_gradcheck_cases(), seed, tolerance, trials);
    bool all_ok = true;
    for (const auto& r : results) {
        all_ok = all_ok && r.passed;
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name
                  << " max_rel_err=" << format_number(r.max_rel_err);
        if (!r.note.empty()) std::cout << " (" << r.note << ")";
        std::cout << "\n";
    }
    return all_ok ? 0 : 2;
}

int cmd_ablate(const json& config, const std::string& out_dir) {
    validate_object(config, "",
                    {{"mode", SchemaField::Str, true},
                     {"s_g", SchemaField::Arr, true},
                     {"s_c", SchemaField::Arr, true},
                     {"base", SchemaField::Obj, true},
                     {"seed", SchemaField::Int, false}});
    const std::string mode = config.at("mode").get<std::string>();
    if (mode != "approx" && mode != "classify") {
        throw ConfigError("config: mode must be 'approx' or 'classify' at /mode");
    }
    CsvWriter csv(out_path(out_dir, "ablate.csv"));
    csv.header({"s_g", "s_c", "params", "macs", "metric", "error"});
    for (const auto& sg : config.at("s_g")) {
        for (const auto& sc : config.at("s_c")) {
            json cell = config.at("base");
            cell["s_g"] = sg;
            cell["s_c"] = sc;
            if (config.contains("seed")) cell["seed"] = config.at("seed");
            std::string err;
            std::int64_t params = 0, macs = 0;
            double metric = 0;
            try {
                if (mode == "approx") {
                    ApproxOutcome out = run_approx(parse_approx(cell));
                    params = out.params;
                    macs = out.macs;
                    metric = out.final_mse;
                } else {
                    ClassifyOutcome out = run_classify(parse_classify(cell));
                    params = out.params;
                    macs = out.macs;
                    metric = out.final_accuracy;
                }
            } catch (const Error& e) {
                err = e.what();
                for (char& ch : err) {
                    if (ch == ',' || ch == '\n') ch = ';';
                }
            }
            csv.row({std::to_string(sg.get<std::int64_t>()), std::to_string(sc.get<std::int64_t>()),
                     std::to_string(params), std::to_string(macs),
                     err.empty() ? format_number(metric) : "",
                     err});
        }
    }
    csv.metadata(config.value("seed", 0), config_hash(config), {{"mode", mode}});
    csv.write();
    return 0;
}

int run(const Options& opts) {
    try {
        json config = json::object();
        if (!opts.config_path.empty()) config = load_json_file(opts.config_path);
        if (opts.seed) config["seed"] = *opts.seed;
        if (opts.head_width) {
            if (opts.command == "approx") {
                config["head_width"] = *opts.head_width;
            } else if (opts.command == "ablate") {
                config["base"]["head_width"] = *opts.head_width;
            } else {
                throw ConfigError("--head-width applies to approx and ablate only");
            }
        }
        if (opts.command == "analyze") return cmd_analyze(config, opts.out_dir);
        if (opts.command == "approx") return cmd_approx(config, opts.out_dir);
        if (opts.command == "reconstruct") return cmd_reconstruct(config, opts.out_dir);
        if (opts.command == "classify") return cmd_classify(config, opts.out_dir);
        if (opts.command == "gradcheck") return cmd_gradcheck(config, opts.out_dir);
        if (opts.command == "ablate") return cmd_ablate(config, opts.out_dir);
        std::cerr << "unknown command '" << opts.command << "'\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace mgic::cli
