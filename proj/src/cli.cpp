#include "meshsr/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "meshsr/datagen.hpp"
#include "meshsr/train.hpp"

namespace meshsr::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Formatting / small file helpers ---------------------------------------------

std::string fmt_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

std::string iso_now_utc() {
    std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path.string());
    out << text;
    out.flush();
    if (!out) throw io_error("write failed: " + path.string());
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw io_error("cannot create directory " + dir.string() + ": " + ec.message());
}

json load_json_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw parse_error(path.string() + ": " + e.what());
    }
}

// Config plumbing --------------------------------------------------------------

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* where) {
    if (!j.is_object()) throw config_error(std::string(where) + " must be a JSON object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* key : allowed)
            if (item.key() == key) known = true;
        if (!known) throw config_error("unknown field '" + item.key() + "' in " + where);
    }
}

template <typename T>
void get_to(const json& j, const char* key, T& out, const char* where) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const json::exception&) {
        throw config_error(std::string(where) + "." + key + " has the wrong type");
    }
}

// One flag's parsed value plus whether it was passed explicitly: the
// precedence rule is flags over config file over defaults.
template <typename T>
struct Flag {
    T value{};
    CLI::Option* opt = nullptr;

    bool given() const { return opt != nullptr && opt->count() > 0; }
    void apply(T& target) const {
        if (given()) target = value;
    }
};

std::uint64_t env_seed() {
    const char* env = std::getenv("MESHSR_SEED");
    if (env == nullptr) return 0;
    std::string s = env;
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw config_error("MESHSR_SEED is not an unsigned integer: '" + s + "'");
    return v;
}

// flag > config file > MESHSR_SEED > 0.
std::uint64_t resolve_seed(const Flag<std::uint64_t>& flag, bool file_given,
                           std::uint64_t file_value) {
    if (flag.given()) return flag.value;
    if (file_given) return file_value;
    return env_seed();
}

void apply_centering(const std::string& name, models::ModelConfig& model) {
    if (name == "none") {
        model.node_centering = false;
        model.message_centering = false;
    } else if (name == "n") {
        model.node_centering = true;
        model.message_centering = false;
    } else if (name == "m") {
        model.node_centering = false;
        model.message_centering = true;
    } else if (name == "nm") {
        model.node_centering = true;
        model.message_centering = true;
    } else {
        throw config_error("unknown centering condition '" + name +
                           "' (expected none, n, m, or nm)");
    }
}

std::string centering_name(const models::ModelConfig& model) {
    if (model.node_centering && model.message_centering) return "nm";
    if (model.node_centering) return "n";
    if (model.message_centering) return "m";
    return "none";
}

json train_config_to_json(const train::TrainConfig& c) {
    json model{{"mpnn", mpnn::to_string(c.model.kind)},
               {"node_centering", c.model.node_centering},
               {"message_centering", c.model.message_centering},
               {"hidden", c.model.hidden},
               {"lr_layers", c.model.lr_layers},
               {"hr_layers", c.model.hr_layers},
               {"k", c.model.k}};
    json adam{{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2},
              {"eps", c.adam.eps}};
    std::vector<double> weights(c.loss_weights.data(),
                                c.loss_weights.data() + c.loss_weights.size());
    return json{{"model", model},
                {"adam", adam},
                {"max_epochs", c.max_epochs},
                {"patience", c.patience},
                {"val_fraction", c.val_fraction},
                {"loss_weights", weights},
                {"seed", c.seed},
                {"mode", train::to_string(c.mode)}};
}

void apply_train_json(const json& j, train::TrainConfig& c) {
    check_keys(j, {"model", "adam", "max_epochs", "patience", "val_fraction", "loss_weights",
                   "seed", "mode"},
               "config");
    if (j.contains("model")) {
        const json& m = j.at("model");
        check_keys(m, {"mpnn", "node_centering", "message_centering", "hidden", "lr_layers",
                       "hr_layers", "k"},
                   "config.model");
        std::string kind;
        get_to(m, "mpnn", kind, "config.model");
        if (!kind.empty()) c.model.kind = mpnn::parse_mpnn_kind(kind);
        get_to(m, "node_centering", c.model.node_centering, "config.model");
        get_to(m, "message_centering", c.model.message_centering, "config.model");
        get_to(m, "hidden", c.model.hidden, "config.model");
        get_to(m, "lr_layers", c.model.lr_layers, "config.model");
        get_to(m, "hr_layers", c.model.hr_layers, "config.model");
        get_to(m, "k", c.model.k, "config.model");
    }
    if (j.contains("adam")) {
        const json& a = j.at("adam");
        check_keys(a, {"lr", "beta1", "beta2", "eps"}, "config.adam");
        get_to(a, "lr", c.adam.lr, "config.adam");
        get_to(a, "beta1", c.adam.beta1, "config.adam");
        get_to(a, "beta2", c.adam.beta2, "config.adam");
        get_to(a, "eps", c.adam.eps, "config.adam");
    }
    get_to(j, "max_epochs", c.max_epochs, "config");
    get_to(j, "patience", c.patience, "config");
    get_to(j, "val_fraction", c.val_fraction, "config");
    if (j.contains("loss_weights")) {
        std::vector<double> w;
        get_to(j, "loss_weights", w, "config");
        c.loss_weights = Eigen::Map<const grad::Vector>(w.data(), static_cast<long>(w.size()));
    }
    get_to(j, "seed", c.seed, "config");
    if (j.contains("mode")) {
        std::string mode;
        get_to(j, "mode", mode, "config");
        c.mode = train::parse_mode(mode);
    }
}

json poisson_spec_to_json(const datagen::PoissonSpec& s) {
    return json{{"n_lr", s.n_lr},
                {"n_hr", s.n_hr},
                {"tolerance", s.tolerance},
                {"omega", s.omega},
                {"max_iterations", s.max_iterations},
                {"center_lo", s.center_lo},
                {"center_hi", s.center_hi},
                {"width_lo", s.width_lo},
                {"width_hi", s.width_hi},
                {"amp_lo", s.amp_lo},
                {"amp_hi", s.amp_hi}};
}

void apply_poisson_json(const json& j, datagen::PoissonSpec& s) {
    check_keys(j, {"n_lr", "n_hr", "tolerance", "omega", "max_iterations", "center_lo",
                   "center_hi", "width_lo", "width_hi", "amp_lo", "amp_hi"},
               "config.spec");
    get_to(j, "n_lr", s.n_lr, "config.spec");
    get_to(j, "n_hr", s.n_hr, "config.spec");
    get_to(j, "tolerance", s.tolerance, "config.spec");
    get_to(j, "omega", s.omega, "config.spec");
    get_to(j, "max_iterations", s.max_iterations, "config.spec");
    get_to(j, "center_lo", s.center_lo, "config.spec");
    get_to(j, "center_hi", s.center_hi, "config.spec");
    get_to(j, "width_lo", s.width_lo, "config.spec");
    get_to(j, "width_hi", s.width_hi, "config.spec");
    get_to(j, "amp_lo", s.amp_lo, "config.spec");
    get_to(j, "amp_hi", s.amp_hi, "config.spec");
}

json jitter_spec_to_json(const datagen::JitterSpec& s) {
    return json{{"n_lr", s.n_lr},
                {"n_hr", s.n_hr},
                {"amplitude", s.amplitude},
                {"smooth_lr", s.smooth_lr},
                {"center_lo", s.center_lo},
                {"center_hi", s.center_hi},
                {"width_lo", s.width_lo},
                {"width_hi", s.width_hi},
                {"amp_lo", s.amp_lo},
                {"amp_hi", s.amp_hi}};
}

void apply_jitter_json(const json& j, datagen::JitterSpec& s) {
    check_keys(j, {"n_lr", "n_hr", "amplitude", "smooth_lr", "center_lo", "center_hi", "width_lo",
                   "width_hi", "amp_lo", "amp_hi"},
               "config.spec");
    get_to(j, "n_lr", s.n_lr, "config.spec");
    get_to(j, "n_hr", s.n_hr, "config.spec");
    get_to(j, "amplitude", s.amplitude, "config.spec");
    get_to(j, "smooth_lr", s.smooth_lr, "config.spec");
    get_to(j, "center_lo", s.center_lo, "config.spec");
    get_to(j, "center_hi", s.center_hi, "config.spec");
    get_to(j, "width_lo", s.width_lo, "config.spec");
    get_to(j, "width_hi", s.width_hi, "config.spec");
    get_to(j, "amp_lo", s.amp_lo, "config.spec");
    get_to(j, "amp_hi", s.amp_hi, "config.spec");
}

void write_manifest(const fs::path& dir, const std::string& command, const json& config,
                    std::uint64_t seed, const std::string& fingerprint,
                    const std::string& started, const std::vector<std::string>& artifacts,
                    const std::string& status = "ok") {
    json j{{"command", command},
           {"config", config},
           {"seed", seed},
           {"dataset_fingerprint", fingerprint},
           {"started", started},
           {"finished", iso_now_utc()},
           {"artifacts", artifacts},
           {"status", status}};
    write_text_file(dir / "run_manifest.json", j.dump(2) + "\n");
}

// Keeps the listed paired samples and demotes the rest to unpaired entries
// (geometry retained, HR values dropped); the LR pool, and with it the
// normalization stats, is unchanged.
mesh::SplitDataset restrict_paired(mesh::SplitDataset ds, const fs::path& selection_file) {
    json j = load_json_file(selection_file);
    if (!j.contains("indices"))
        throw config_error("selection file has no 'indices' array: " + selection_file.string());
    std::vector<int> keep;
    get_to(j, "indices", keep, "selection");

    std::vector<char> selected(ds.paired.size(), 0);
    for (int idx : keep) {
        if (idx < 0 || idx >= static_cast<int>(ds.paired.size()))
            throw config_error("selection index " + std::to_string(idx) +
                               " outside the paired pool of " + std::to_string(ds.paired.size()));
        if (selected[static_cast<std::size_t>(idx)])
            throw config_error("selection index " + std::to_string(idx) + " listed twice");
        selected[static_cast<std::size_t>(idx)] = 1;
    }

    mesh::SplitDataset out;
    out.meshes = std::move(ds.meshes);
    out.stats = ds.stats;
    out.generator_json = std::move(ds.generator_json);
    out.unpaired = std::move(ds.unpaired);
    for (std::size_t i = 0; i < ds.paired.size(); ++i) {
        if (selected[i]) {
            out.paired.push_back(std::move(ds.paired[i]));
        } else {
            int hr_mesh = ds.paired[i].hr.mesh_id;
            out.unpaired.push_back({std::move(ds.paired[i].lr), hr_mesh});
        }
    }
    out.validate();
    return out;
}

// gen-data ---------------------------------------------------------------------

struct GenOpts {
    Flag<std::string> kind;
    Flag<int> n, nh;
    Flag<std::uint64_t> seed;
    std::string out;
    std::string config_file;
    Flag<int> n_lr, n_hr;
    Flag<double> tolerance, omega, amplitude;
    Flag<long> max_iterations;
    Flag<bool> smooth_lr;
};

int cmd_gen_data(const GenOpts& o) {
    std::string started = iso_now_utc();
    json file = o.config_file.empty() ? json::object() : load_json_file(o.config_file);
    check_keys(file, {"kind", "n", "nh", "seed", "spec"}, "config");

    std::string kind;
    get_to(file, "kind", kind, "config");
    o.kind.apply(kind);
    if (kind.empty()) throw config_error("--kind is required (poisson or jitter)");
    if (kind != "poisson" && kind != "jitter")
        throw config_error("unknown dataset kind '" + kind + "' (expected poisson or jitter)");

    int n = 200, nh = 20;
    get_to(file, "n", n, "config");
    get_to(file, "nh", nh, "config");
    o.n.apply(n);
    o.nh.apply(nh);

    std::uint64_t file_seed = 0;
    std::uint64_t seed = resolve_seed(o.seed, file.contains("seed"),
                                      (get_to(file, "seed", file_seed, "config"), file_seed));

    auto apply_common_flags = [&](auto& spec) {
        o.n_lr.apply(spec.n_lr);
        o.n_hr.apply(spec.n_hr);
    };
    auto reject_flag = [&](const auto& flag, const char* name, const char* needs) {
        if (flag.given())
            throw config_error(std::string(name) + " applies only to the " + needs +
                               " generator");
    };

    fs::path out_dir = o.out;
    ensure_dir(out_dir);

    mesh::SplitDataset ds;
    json spec_echo;
    if (kind == "poisson") {
        reject_flag(o.amplitude, "--amplitude", "jitter");
        reject_flag(o.smooth_lr, "--smooth-lr", "jitter");
        datagen::PoissonSpec spec;
        if (file.contains("spec")) apply_poisson_json(file.at("spec"), spec);
        apply_common_flags(spec);
        o.tolerance.apply(spec.tolerance);
        o.omega.apply(spec.omega);
        o.max_iterations.apply(spec.max_iterations);
        ds = datagen::gen_poisson_dataset(spec, n, nh, seed);
        spec_echo = poisson_spec_to_json(spec);
    } else {
        reject_flag(o.tolerance, "--tolerance", "poisson");
        reject_flag(o.omega, "--omega", "poisson");
        reject_flag(o.max_iterations, "--max-iterations", "poisson");
        datagen::JitterSpec spec;
        if (file.contains("spec")) apply_jitter_json(file.at("spec"), spec);
        apply_common_flags(spec);
        o.amplitude.apply(spec.amplitude);
        o.smooth_lr.apply(spec.smooth_lr);
        ds = datagen::gen_jitter_dataset(spec, n, nh, seed);
        spec_echo = jitter_spec_to_json(spec);
    }

    mesh::save_dataset(ds, out_dir);
    std::string fingerprint = mesh::dataset_fingerprint(out_dir);

    json config_echo{{"kind", kind}, {"n", n}, {"nh", nh}, {"seed", seed}, {"spec", spec_echo}};
    write_manifest(out_dir, "gen-data", config_echo, seed, fingerprint, started,
                   {"manifest.json", "meshes.jsonl", "samples.jsonl"});

    std::cout << "generated " << kind << " dataset: " << ds.paired.size() << " paired + "
              << ds.unpaired.size() << " unpaired samples -> " << out_dir.string() << "\n";
    json gen = json::parse(ds.generator_json);
    if (gen.contains("max_residual"))
        std::cout << "max solver residual: " << fmt_double(gen["max_residual"].get<double>())
                  << "\n";
    std::cout << "dataset fingerprint: " << fingerprint << "\n";
    return 0;
}

// train --------------------------------------------------------------------

struct TrainOpts {
    std::string data, out, config_file, restrict_file;
    Flag<std::string> mode, mpnn, centering;
    Flag<int> hidden, lr_layers, hr_layers, k, epochs, patience;
    Flag<double> learning_rate, beta1, beta2, eps, val_fraction;
    Flag<std::vector<double>> loss_weights;
    Flag<std::uint64_t> seed;
};

train::TrainConfig assemble_train_config(const TrainOpts& o, const json& file) {
    train::TrainConfig c;
    apply_train_json(file, c);

    if (o.mode.given()) c.mode = train::parse_mode(o.mode.value);
    if (o.mpnn.given()) c.model.kind = mpnn::parse_mpnn_kind(o.mpnn.value);
    if (o.centering.given()) apply_centering(o.centering.value, c.model);
    o.hidden.apply(c.model.hidden);
    o.lr_layers.apply(c.model.lr_layers);
    o.hr_layers.apply(c.model.hr_layers);
    o.k.apply(c.model.k);
    o.learning_rate.apply(c.adam.lr);
    o.beta1.apply(c.adam.beta1);
    o.beta2.apply(c.adam.beta2);
    o.eps.apply(c.adam.eps);
    o.epochs.apply(c.max_epochs);
    o.patience.apply(c.patience);
    o.val_fraction.apply(c.val_fraction);
    if (o.loss_weights.given())
        c.loss_weights = Eigen::Map<const grad::Vector>(
            o.loss_weights.value.data(), static_cast<long>(o.loss_weights.value.size()));
    c.seed = resolve_seed(o.seed, file.contains("seed"), c.seed);
    return c;
}

int cmd_train(const TrainOpts& o) {
    std::string started = iso_now_utc();
    json file = o.config_file.empty() ? json::object() : load_json_file(o.config_file);
    train::TrainConfig config = assemble_train_config(o, file);

    mesh::SplitDataset ds = mesh::load_dataset(o.data);
    std::string fingerprint = mesh::dataset_fingerprint(o.data);
    if (!o.restrict_file.empty()) ds = restrict_paired(std::move(ds), o.restrict_file);

    fs::path out_dir = o.out;
    ensure_dir(out_dir);

    json config_echo = train_config_to_json(config);
    if (!o.restrict_file.empty()) config_echo["restrict"] = o.restrict_file;
    config_echo["centering"] = centering_name(config.model);

    train::Trainer trainer(config, ds);
    train::RunMetrics metrics;
    try {
        metrics = trainer.run();
    } catch (const divergence_error& e) {
        fs::path dump = out_dir / "diverged_checkpoint.json";
        models::save_checkpoint(trainer.params(), dump);
        write_manifest(out_dir, "train", config_echo, config.seed, fingerprint, started,
                       {"diverged_checkpoint.json"}, "diverged");
        std::cerr << "training diverged: " << e.what() << "\n";
        std::cerr << "state dump: " << dump.string() << "\n";
        return 3;
    }

    models::save_checkpoint(trainer.params(), out_dir / "checkpoint.json");
    train::write_metrics_csv(metrics, out_dir / "metrics.csv");

    json summary{{"final_rmse", metrics.best_val_rmse},
                 {"best_epoch", metrics.best_epoch},
                 {"epochs_run", metrics.epochs.size()},
                 {"seed", config.seed},
                 {"mode", train::to_string(config.mode)},
                 {"config", config_echo}};
    write_text_file(out_dir / "summary.json", summary.dump(2) + "\n");

    write_manifest(out_dir, "train", config_echo, config.seed, fingerprint, started,
                   {"checkpoint.json", "metrics.csv", "summary.json"});

    std::cout << "trained " << train::to_string(config.mode) << " for " << metrics.epochs.size()
              << " epochs: best validation RMSE " << fmt_double(metrics.best_val_rmse)
              << " at epoch " << metrics.best_epoch << "\n";
    std::cout << "artifacts: " << out_dir.string() << "\n";
    return 0;
}

// eval -----------------------------------------------------------------------

struct EvalOpts {
    std::string checkpoint, data, out;
};

int cmd_eval(const EvalOpts& o) {
    std::string started = iso_now_utc();
    models::ModelParams params = models::load_checkpoint(o.checkpoint);
    mesh::SplitDataset ds = mesh::load_dataset(o.data);
    std::string fingerprint = mesh::dataset_fingerprint(o.data);

    if (params.field_dim != ds.field_dim() || params.space_dim != ds.space_dim())
        throw dimension_error(
            "checkpoint expects " + std::to_string(params.field_dim) + " field column(s) in " +
            std::to_string(params.space_dim) + "-dimensional space, but the dataset provides " +
            std::to_string(ds.field_dim()) + " column(s) in " + std::to_string(ds.space_dim()) +
            " dimension(s)");

    models::GeometryCache geo(ds, params.config.k);
    double rmse = train::evaluate_rmse(params, geo, ds.paired);
    grad::Vector per_col = train::evaluate_rmse_per_column(params, geo, ds.paired);
    double baseline = train::knn_baseline_rmse(geo, ds.paired);

    std::cout << "rmse: " << fmt_double(rmse) << "\n";
    for (long c = 0; c < per_col.size(); ++c)
        std::cout << "rmse[col " << c << "]: " << fmt_double(per_col[c]) << "\n";
    std::cout << "knn baseline rmse: " << fmt_double(baseline) << "\n";

    fs::path out_dir = o.out;
    ensure_dir(out_dir);
    std::vector<double> cols(per_col.data(), per_col.data() + per_col.size());
    json report{{"rmse", rmse},
                {"rmse_per_column", cols},
                {"knn_baseline_rmse", baseline},
                {"pairs", ds.paired.size()},
                {"checkpoint", o.checkpoint}};
    write_text_file(out_dir / "eval.json", report.dump(2) + "\n");

    json config_echo{{"checkpoint", o.checkpoint}, {"data", o.data}};
    write_manifest(out_dir, "eval", config_echo, 0, fingerprint, started, {"eval.json"});
    return 0;
}

// select-hr --------------------------------------------------------------------

struct SelectOpts {
    std::string data, out;
    int nh = 0;
    Flag<double> bandwidth;
    Flag<std::uint64_t> seed;
};

int cmd_select_hr(const SelectOpts& o) {
    std::string started = iso_now_utc();
    mesh::SplitDataset ds = mesh::load_dataset(o.data);
    std::string fingerprint = mesh::dataset_fingerprint(o.data);

    grad::Matrix emb = datagen::paired_lr_embeddings(ds);
    double bandwidth =
        o.bandwidth.given() ? o.bandwidth.value : datagen::median_pairwise_bandwidth(emb);
    std::uint64_t seed = resolve_seed(o.seed, false, 0);
    Rng rng(seed);
    datagen::MmdSelection sel = datagen::select_hr_mmd(emb, o.nh, bandwidth, rng);

    fs::path out_dir = o.out;
    ensure_dir(out_dir);
    json selection{{"indices", sel.indices},
                   {"mmd", sel.mmd},
                   {"mmd_trace", sel.mmd_trace},
                   {"bandwidth", bandwidth},
                   {"pool", emb.rows()}};
    write_text_file(out_dir / "selection.json", selection.dump(2) + "\n");

    json config_echo{{"nh", o.nh}, {"bandwidth", bandwidth}, {"seed", seed}, {"data", o.data}};
    write_manifest(out_dir, "select-hr", config_echo, seed, fingerprint, started,
                   {"selection.json"});

    std::cout << "selected " << sel.indices.size() << " of " << emb.rows()
              << " paired samples, squared MMD " << fmt_double(sel.mmd) << "\n";
    std::cout << "selection file: " << (out_dir / "selection.json").string() << "\n";
    return 0;
}

// probe-landscape ----------------------------------------------------------------

struct ProbeOpts {
    std::string checkpoint, data, out, config_file;
    int steps = 50;
    double multiplier = 4.0;
    Flag<std::string> mode;
    Flag<double> learning_rate;
    Flag<std::uint64_t> seed;
};

int cmd_probe(const ProbeOpts& o) {
    std::string started = iso_now_utc();
    models::ModelParams params = models::load_checkpoint(o.checkpoint);
    mesh::SplitDataset ds = mesh::load_dataset(o.data);
    std::string fingerprint = mesh::dataset_fingerprint(o.data);

    json file = o.config_file.empty() ? json::object() : load_json_file(o.config_file);
    train::TrainConfig config;
    apply_train_json(file, config);
    config.model = params.config;  // the checkpoint owns the architecture
    if (o.mode.given()) config.mode = train::parse_mode(o.mode.value);
    o.learning_rate.apply(config.adam.lr);
    config.seed = resolve_seed(o.seed, file.contains("seed"), config.seed);

    train::Trainer trainer(config, ds, &params);
    std::vector<train::ProbePoint> points = train::probe_loss_landscape(trainer, o.steps,
                                                                        o.multiplier);

    fs::path out_dir = o.out;
    ensure_dir(out_dir);
    std::string csv = "step,loss,perturbed_loss\n";
    int finite = 0;
    for (const auto& p : points) {
        csv += std::to_string(p.step) + "," + fmt_double(p.loss) + "," + fmt_double(p.perturbed) +
               "\n";
        if (std::isfinite(p.loss) && std::isfinite(p.perturbed)) ++finite;
    }
    write_text_file(out_dir / "probe.csv", csv);

    json config_echo = train_config_to_json(config);
    config_echo["multiplier"] = o.multiplier;
    config_echo["steps"] = o.steps;
    config_echo["checkpoint"] = o.checkpoint;
    write_manifest(out_dir, "probe-landscape", config_echo, config.seed, fingerprint, started,
                   {"probe.csv"});

    std::cout << "probed " << points.size() << " steps (" << finite
              << " with finite loss and perturbed loss) -> "
              << (out_dir / "probe.csv").string() << "\n";
    return 0;
}

// Wiring -----------------------------------------------------------------------

int dispatch(std::vector<std::string>& args) {
    CLI::App app{"mesh field super-resolution toolkit"};
    app.require_subcommand(1);

    GenOpts g;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    g.kind.opt = gen->add_option("--kind", g.kind.value, "dataset family: poisson or jitter");
    g.n.opt = gen->add_option("--n", g.n.value, "total number of samples");
    g.nh.opt = gen->add_option("--nh", g.nh.value, "number of paired (HR-labeled) samples");
    g.seed.opt = gen->add_option("--seed", g.seed.value, "generator seed");
    gen->add_option("--out", g.out, "output dataset directory")->required();
    gen->add_option("--config", g.config_file, "JSON config file");
    g.n_lr.opt = gen->add_option("--n-lr", g.n_lr.value, "LR grid size per side");
    g.n_hr.opt = gen->add_option("--n-hr", g.n_hr.value, "HR grid size per side");
    g.tolerance.opt = gen->add_option("--tolerance", g.tolerance.value,
                                      "poisson: solver residual tolerance");
    g.omega.opt = gen->add_option("--omega", g.omega.value, "poisson: SOR relaxation factor");
    g.max_iterations.opt = gen->add_option("--max-iterations", g.max_iterations.value,
                                           "poisson: solver iteration cap");
    g.amplitude.opt = gen->add_option("--amplitude", g.amplitude.value,
                                      "jitter: node displacement as a fraction of spacing");
    g.smooth_lr.opt = gen->add_option("--smooth-lr", g.smooth_lr.value,
                                      "jitter: smooth LR fields with a one-ring average");

    TrainOpts t;
    auto* tr = app.add_subcommand("train", "train the super-resolution models");
    tr->add_option("--data", t.data, "dataset directory")->required();
    tr->add_option("--out", t.out, "run output directory")->required();
    tr->add_option("--config", t.config_file, "JSON config file");
    tr->add_option("--restrict", t.restrict_file,
                   "selection file restricting which paired samples keep HR labels");
    t.mode.opt = tr->add_option("--mode", t.mode.value, "complementary or supervised");
    t.mpnn.opt = tr->add_option("--mpnn", t.mpnn.value, "layer type: gcn, sage, gin, or mgn");
    t.centering.opt = tr->add_option("--centering", t.centering.value,
                                     "centering condition: none, n, m, or nm");
    t.hidden.opt = tr->add_option("--hidden", t.hidden.value, "hidden width");
    t.lr_layers.opt = tr->add_option("--lr-layers", t.lr_layers.value, "LR-mesh layer count");
    t.hr_layers.opt = tr->add_option("--hr-layers", t.hr_layers.value, "HR-mesh layer count");
    t.k.opt = tr->add_option("--k", t.k.value, "interpolation neighbor count");
    t.learning_rate.opt = tr->add_option("--learning-rate", t.learning_rate.value,
                                         "Adam learning rate");
    t.beta1.opt = tr->add_option("--beta1", t.beta1.value, "Adam beta1");
    t.beta2.opt = tr->add_option("--beta2", t.beta2.value, "Adam beta2");
    t.eps.opt = tr->add_option("--eps", t.eps.value, "Adam epsilon");
    t.epochs.opt = tr->add_option("--epochs", t.epochs.value, "maximum epochs");
    t.patience.opt = tr->add_option("--patience", t.patience.value,
                                    "epochs without improvement before stopping");
    t.val_fraction.opt = tr->add_option("--val-fraction", t.val_fraction.value,
                                        "paired fraction held out for validation");
    t.loss_weights.opt = tr->add_option("--loss-weights", t.loss_weights.value,
                                        "per-column loss weights");
    t.seed.opt = tr->add_option("--seed", t.seed.value, "run seed");

    EvalOpts e;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    ev->add_option("--checkpoint", e.checkpoint, "checkpoint file")->required();
    ev->add_option("--data", e.data, "dataset directory")->required();
    ev->add_option("--out", e.out, "report output directory")->required();

    SelectOpts s;
    auto* sel = app.add_subcommand("select-hr", "pick which samples deserve HR labels");
    sel->add_option("--data", s.data, "dataset directory")->required();
    sel->add_option("--nh", s.nh, "subset size")->required();
    sel->add_option("--out", s.out, "selection output directory")->required();
    s.bandwidth.opt = sel->add_option("--bandwidth", s.bandwidth.value,
                                      "RBF kernel bandwidth (default: median heuristic)");
    s.seed.opt = sel->add_option("--seed", s.seed.value, "seed for the first greedy pick");

    ProbeOpts p;
    auto* pr = app.add_subcommand("probe-landscape", "record loss vs gradient-step loss");
    pr->add_option("--checkpoint", p.checkpoint, "checkpoint file")->required();
    pr->add_option("--data", p.data, "dataset directory")->required();
    pr->add_option("--out", p.out, "probe output directory")->required();
    pr->add_option("--config", p.config_file, "JSON config file");
    pr->add_option("--steps", p.steps, "number of probe points");
    pr->add_option("--multiplier", p.multiplier, "gradient step size in learning-rate units");
    p.mode.opt = pr->add_option("--mode", p.mode.value, "complementary or supervised");
    p.learning_rate.opt = pr->add_option("--learning-rate", p.learning_rate.value,
                                         "Adam learning rate the probe scales");
    p.seed.opt = pr->add_option("--seed", p.seed.value, "batch sampling seed");

    std::reverse(args.begin(), args.end());
    try {
        app.parse(std::move(args));
    } catch (const CLI::ParseError& err) {
        int code = app.exit(err);
        return code == 0 ? 0 : 2;
    }

    if (gen->parsed()) return cmd_gen_data(g);
    if (tr->parsed()) return cmd_train(t);
    if (ev->parsed()) return cmd_eval(e);
    if (sel->parsed()) return cmd_select_hr(s);
    if (pr->parsed()) return cmd_probe(p);
    return 2;
}

}  // namespace

int run_cli(std::vector<std::string> args) {
    try {
        return dispatch(args);
    } catch (const config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const divergence_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const solver_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const io_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const parse_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::logic_error& e) {  // dimension, index, and contract errors
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace meshsr::cli
