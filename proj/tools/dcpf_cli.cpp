// Command-line interface for the dcpf library: simulate, prepare,
// train, evaluate, recommend and inspect-chains subcommands.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dcpf/dcpf.hpp"

namespace fs = std::filesystem;

namespace {

struct missing_input {
    std::string path;
};

/// Collects output paths and removes them unless committed, so a failed
/// command never leaves partial artifacts behind.
class OutputSet {
public:
    ~OutputSet() {
        if (committed_) return;
        for (const std::string& p : paths_) {
            std::error_code ec;
            fs::remove(p, ec);
        }
    }
    std::ofstream open(const std::string& path, bool binary = false) {
        paths_.push_back(path);
        std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
        if (!out) throw dcpf::io_error("cannot open '" + path + "' for writing");
        return out;
    }
    void commit() { committed_ = true; }

private:
    std::vector<std::string> paths_;
    bool committed_ = false;
};

std::ifstream open_input(const std::string& path, bool binary = false) {
    if (!fs::exists(path)) throw missing_input{path};
    std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
    if (!in) throw dcpf::io_error("cannot open '" + path + "' for reading");
    return in;
}

std::vector<std::string> split_list(const std::string& csv) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(csv);
    while (std::getline(in, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

dcpf::InteractionTensor load_tensor_with_ids(const std::string& prefix) {
    auto tensor_in = open_input(prefix + ".tensor");
    dcpf::InteractionTensor tensor = dcpf::read_tensor(tensor_in);
    auto users_in = open_input(prefix + ".users.ids");
    auto items_in = open_input(prefix + ".items.ids");
    dcpf::attach_id_maps(tensor, dcpf::read_id_map(users_in),
                         dcpf::read_id_map(items_in));
    return tensor;
}

dcpf::FittedModel load_model_with_ids(const std::string& path) {
    auto in = open_input(path, true);
    dcpf::ModelFileRefs refs;
    dcpf::FittedModel model = dcpf::read_model(in, &refs);
    fs::path dir = fs::path(path).parent_path();
    auto resolve = [&](const std::string& name) {
        fs::path p(name);
        return p.is_absolute() ? p.string() : (dir / p).string();
    };
    auto users_in = open_input(resolve(refs.users_ids_file));
    auto items_in = open_input(resolve(refs.items_ids_file));
    dcpf::IdMap users = dcpf::read_id_map(users_in);
    dcpf::IdMap items = dcpf::read_id_map(items_in);
    if (users.size() != model.num_users() || items.size() != model.num_items())
        throw dcpf::io_error("model id maps do not match model dimensions");
    model.users = std::move(users);
    model.items = std::move(items);
    return model;
}

// ---------------------------------------------------------------------------

struct HyperFlags {
    double epsilon = 1.01;     // auxiliary-draw shape
    double iota = 1.01;        // state-draw shape
    double state_rate = 1.0;   // multiplies the auxiliary state in the rate
    double aux_rate = 1.0;     // multiplies the previous state in the rate
    double init_shape = 1.01;  // shape of the initial-rate draw

    dcpf::ChainHyper to_hyper() const {
        dcpf::ChainHyper h;
        h.shape_aux = epsilon;
        h.shape_state = iota;
        h.rate_state = state_rate;
        h.rate_aux = aux_rate;
        h.init_shape = init_shape;
        h.init_mean = 1.0;  // resolved by the initialization rule
        return h;
    }
};

void add_hyper_flags(CLI::App* cmd, HyperFlags& flags) {
    cmd->add_option("--epsilon", flags.epsilon,
                    "Shape of auxiliary-state draws (both sides)")
        ->capture_default_str();
    cmd->add_option("--iota", flags.iota, "Shape of latent-state draws (both sides)")
        ->capture_default_str();
    cmd->add_option("--state-rate", flags.state_rate,
                    "Rate multiplier on the auxiliary state")
        ->capture_default_str();
    cmd->add_option("--aux-rate", flags.aux_rate,
                    "Rate multiplier on the previous latent state")
        ->capture_default_str();
    cmd->add_option("--init-shape", flags.init_shape,
                    "Shape of the per-entity initial-rate draw")
        ->capture_default_str();
}

void dump_train_defaults(const dcpf::FitConfig& config, const HyperFlags& flags,
                         std::ostream& out) {
    using dcpf::format_double;
    out << "k " << config.num_components << '\n';
    out << "tau " << format_double(config.learning_delay) << '\n';
    out << "xi " << format_double(config.learning_power) << '\n';
    out << "user.aux_shape " << format_double(flags.epsilon) << '\n';
    out << "user.state_shape " << format_double(flags.iota) << '\n';
    out << "user.state_rate " << format_double(flags.state_rate) << '\n';
    out << "user.aux_rate " << format_double(flags.aux_rate) << '\n';
    out << "user.init_shape " << format_double(flags.init_shape) << '\n';
    out << "item.aux_shape " << format_double(flags.epsilon) << '\n';
    out << "item.state_shape " << format_double(flags.iota) << '\n';
    out << "item.state_rate " << format_double(flags.state_rate) << '\n';
    out << "item.aux_rate " << format_double(flags.aux_rate) << '\n';
    out << "item.init_shape " << format_double(flags.init_shape) << '\n';
    out << "init_mean_rule sqrt(E[eta]/K)\n";
    out << "element " << dcpf::family_name(config.family) << '\n';
    out << "tol " << format_double(config.convergence_tol) << '\n';
    out << "max_epochs " << config.max_epochs << '\n';
    out << "batch " << config.batch_size << '\n';
    out << "train_on " << dcpf::train_on_name(config.train_on) << '\n';
    out << "validation_on " << dcpf::train_on_name(config.validation_on) << '\n';
    out << "mle_sample " << config.mle_sample_size << '\n';
    out << "eta_max " << config.eta_max << '\n';
}

// ---------------------------------------------------------------------------

int cmd_simulate(const std::string& out_prefix, dcpf::GeneratorConfig config,
                 std::size_t holdout, double val_frac, bool write_truth_file) {
    dcpf::SyntheticDataset data = dcpf::generate(config);
    OutputSet outputs;
    {
        auto out = outputs.open(out_prefix + ".tensor");
        dcpf::write_tensor(data.tensor, out);
    }
    {
        auto out = outputs.open(out_prefix + ".users.ids");
        dcpf::write_id_map(data.tensor.users, out);
    }
    {
        auto out = outputs.open(out_prefix + ".items.ids");
        dcpf::write_id_map(data.tensor.items, out);
    }
    if (write_truth_file) {
        auto out = outputs.open(out_prefix + ".truth");
        dcpf::write_truth(data, out);
    }
    if (holdout >= 1 && holdout < config.num_windows) {
        dcpf::DataSplit split =
            dcpf::split_by_time(data.tensor, holdout, val_frac, config.seed);
        auto out = outputs.open(out_prefix + ".split");
        dcpf::write_split_manifest(split, fs::path(out_prefix + ".tensor")
                                              .filename()
                                              .string(),
                                   out);
    }
    outputs.commit();
    std::cout << "cells " << data.tensor.nnz() << '\n';
    for (std::size_t t = 0; t < data.tensor.num_windows(); ++t)
        std::cout << "window " << t << " nnz " << data.tensor.nnz_in_window(t)
                  << " sparsity " << dcpf::format_double(data.tensor.sparsity(t))
                  << '\n';
    return 0;
}

int cmd_prepare(const std::string& input, const std::string& out_prefix,
                const dcpf::ParseOptions& parse_opts, std::size_t windows,
                std::int64_t window_length, const std::string& dedup,
                const std::string& ratings_kind, bool active,
                const dcpf::ActiveFilter& filter, std::size_t holdout,
                double val_frac, std::uint64_t seed) {
    auto in = open_input(input);
    dcpf::ParseResult parsed = dcpf::parse_events(in, parse_opts);
    for (const auto& bad : parsed.malformed)
        dcpf::log_info("line %zu: %s", bad.line_number, bad.message.c_str());
    if (parsed.events.empty()) throw dcpf::parse_error("prepare: no events parsed");

    std::int64_t min_ts = parsed.events.front().timestamp;
    std::int64_t max_ts = min_ts;
    for (const auto& ev : parsed.events) {
        min_ts = std::min(min_ts, ev.timestamp);
        max_ts = std::max(max_ts, ev.timestamp);
    }
    dcpf::TimeGrid grid =
        windows > 0 ? dcpf::TimeGrid::with_num_windows(min_ts, max_ts, windows)
                    : dcpf::TimeGrid::with_window_length(min_ts, max_ts,
                                                         window_length);

    dcpf::DedupPolicy policy;
    if (dedup == "auto")
        policy = ratings_kind == "stars" ? dcpf::DedupPolicy::keep_last
                                         : dcpf::DedupPolicy::sum;
    else if (dedup == "sum")
        policy = dcpf::DedupPolicy::sum;
    else if (dedup == "keep_first")
        policy = dcpf::DedupPolicy::keep_first;
    else if (dedup == "keep_last")
        policy = dcpf::DedupPolicy::keep_last;
    else
        throw std::invalid_argument("unknown dedup policy '" + dedup + "'");

    dcpf::InteractionTensor tensor = dcpf::discretize(parsed.events, grid, policy);
    if (active) tensor = dcpf::filter_active(tensor, filter);
    dcpf::DataSplit split = dcpf::split_by_time(tensor, holdout, val_frac, seed);

    OutputSet outputs;
    {
        auto out = outputs.open(out_prefix + ".tensor");
        dcpf::write_tensor(tensor, out);
    }
    {
        auto out = outputs.open(out_prefix + ".users.ids");
        dcpf::write_id_map(tensor.users, out);
    }
    {
        auto out = outputs.open(out_prefix + ".items.ids");
        dcpf::write_id_map(tensor.items, out);
    }
    {
        auto out = outputs.open(out_prefix + ".split");
        dcpf::write_split_manifest(
            split, fs::path(out_prefix + ".tensor").filename().string(), out);
    }
    outputs.commit();

    std::cout << "users " << tensor.num_users() << '\n';
    std::cout << "items " << tensor.num_items() << '\n';
    std::cout << "windows " << tensor.num_windows() << '\n';
    std::cout << "cells " << tensor.nnz() << '\n';
    for (std::size_t t = 0; t < tensor.num_windows(); ++t)
        std::cout << "window " << t << " nnz " << tensor.nnz_in_window(t)
                  << " sparsity " << dcpf::format_double(tensor.sparsity(t)) << '\n';
    std::cout << "train_cells " << split.train.nnz() << '\n';
    std::cout << "validation_cells " << split.validation.nnz() << '\n';
    std::cout << "test_cells " << split.test.nnz() << '\n';
    return 0;
}

int cmd_train(const std::string& tensor_prefix, const std::string& out_path,
              dcpf::FitConfig config, bool static_ablation,
              const std::string& static_dedup) {
    dcpf::InteractionTensor tensor = load_tensor_with_ids(tensor_prefix);
    auto manifest_in = open_input(tensor_prefix + ".split");
    dcpf::SplitManifest manifest = dcpf::read_split_manifest(manifest_in);
    dcpf::DataSplit split = dcpf::apply_split_manifest(tensor, manifest);

    if (static_ablation) {
        dcpf::CrossWindowPolicy policy = static_dedup == "keep_last"
                                             ? dcpf::CrossWindowPolicy::keep_last
                                             : dcpf::CrossWindowPolicy::keep_first;
        split.train = dcpf::collapse_to_static(
            dcpf::dedup_across_windows(split.train, policy));
        dcpf::log_info("static ablation: training on a single collapsed window");
    }

    dcpf::FittedModel model = dcpf::fit(split, config);

    OutputSet outputs;
    std::string users_ids = fs::path(out_path).filename().string() + ".users.ids";
    std::string items_ids = fs::path(out_path).filename().string() + ".items.ids";
    {
        auto out = outputs.open(out_path + ".users.ids");
        dcpf::write_id_map(model.users, out);
    }
    {
        auto out = outputs.open(out_path + ".items.ids");
        dcpf::write_id_map(model.items, out);
    }
    {
        auto out = outputs.open(out_path, true);
        dcpf::write_model(model, out, users_ids, items_ids);
    }
    {
        auto out = outputs.open(out_path + ".log");
        for (const dcpf::EpochLog& row : model.history)
            out << row.epoch << ' ' << dcpf::format_double(row.validation_loglik)
                << ' ' << dcpf::format_double(row.rho) << '\n';
        out << "converged " << (model.converged ? "true" : "false") << '\n';
    }
    outputs.commit();
    std::cout << "epochs " << (model.history.size() - 1) << '\n';
    std::cout << "best_epoch " << model.best_epoch << '\n';
    std::cout << "converged " << (model.converged ? "true" : "false") << '\n';
    if (model.rate_floor_hits > 0)
        std::cout << "rate_floor_hits " << model.rate_floor_hits << '\n';
    return 0;
}

int cmd_evaluate(const std::string& model_path, const std::string& tensor_prefix,
                 const std::string& out_path, const std::string& metrics_csv,
                 const std::string& negatives, bool exclude_train,
                 const std::string& roc_path, const std::string& per_user_path,
                 std::uint64_t seed, std::size_t threads) {
    dcpf::FittedModel model = load_model_with_ids(model_path);
    dcpf::InteractionTensor tensor = load_tensor_with_ids(tensor_prefix);
    auto manifest_in = open_input(tensor_prefix + ".split");
    dcpf::SplitManifest manifest = dcpf::read_split_manifest(manifest_in);
    dcpf::DataSplit split = dcpf::apply_split_manifest(tensor, manifest);

    if (model.num_users() != tensor.num_users() ||
        model.num_items() != tensor.num_items())
        throw dcpf::error("evaluate: model was trained on " +
                          std::to_string(model.num_users()) + "x" +
                          std::to_string(model.num_items()) +
                          " entities but the tensor has " +
                          std::to_string(tensor.num_users()) + "x" +
                          std::to_string(tensor.num_items()));
    if (model.train_windows() > tensor.num_windows())
        throw dcpf::error("evaluate: model horizon exceeds the tensor grid");

    dcpf::EvalConfig config;
    config.seed = seed;
    config.threads = threads;
    config.exclude_train_items = exclude_train;
    config.collect_per_user = !per_user_path.empty();
    config.precision_ls.clear();
    config.ndcg_ls.clear();
    config.with_loglik = false;
    for (const std::string& metric : split_list(metrics_csv)) {
        if (metric == "auc") continue;  // always computed
        if (metric == "loglik") {
            config.with_loglik = true;
        } else if (metric.rfind("prec@", 0) == 0) {
            config.precision_ls.push_back(std::stoul(metric.substr(5)));
        } else if (metric.rfind("ndcg@", 0) == 0) {
            config.ndcg_ls.push_back(std::stoul(metric.substr(5)));
        } else {
            throw std::invalid_argument("unknown metric '" + metric + "'");
        }
    }

    if (negatives == "auto") {
        config.binarize.mode = dcpf::NegativeMode::automatic;
    } else if (negatives == "all") {
        config.binarize.mode = dcpf::NegativeMode::all;
    } else if (negatives.rfind("sampled:", 0) == 0) {
        config.binarize.mode = dcpf::NegativeMode::sampled;
        config.binarize.per_user = std::stoul(negatives.substr(8));
    } else {
        throw std::invalid_argument("unknown negatives mode '" + negatives + "'");
    }

    dcpf::EvalReport report = dcpf::evaluate(model, split, config);

    OutputSet outputs;
    {
        auto out = outputs.open(out_path);
        dcpf::write_report(report, out);
    }
    {
        auto out = outputs.open(out_path + ".rows");
        dcpf::write_report_rows(report, out);
    }
    if (!roc_path.empty()) {
        dcpf::BinarizeConfig bin = config.binarize;
        bin.seed = seed;
        dcpf::BinarizedTestset binarized = dcpf::binarize_testset(split, bin);
        std::vector<double> scores(binarized.cells.size());
        dcpf::parallel_for(binarized.cells.size(), threads, [&](std::size_t i) {
            const dcpf::BinarizedCell& c = binarized.cells[i];
            scores[i] = dcpf::score(model, c.user, c.item, c.window)
                            .ranking_score(model.element.family);
        });
        auto out = outputs.open(roc_path);
        dcpf::write_roc(dcpf::roc_curve(scores, binarized.labels), out);
    }
    if (!per_user_path.empty()) {
        auto out = outputs.open(per_user_path);
        for (const dcpf::PerUserMetrics& row : report.per_user) {
            for (const auto& [l, v] : row.precision_at)
                out << model.users.lookup(row.user) << ' ' << row.window << " prec@"
                    << l << ' ' << dcpf::format_double(v) << '\n';
            for (const auto& [l, v] : row.ndcg_at)
                out << model.users.lookup(row.user) << ' ' << row.window << " ndcg@"
                    << l << ' ' << dcpf::format_double(v) << '\n';
        }
    }
    outputs.commit();
    std::cout << "auc " << dcpf::format_double(report.auc) << '\n';
    return 0;
}

int cmd_recommend(const std::string& model_path, const std::string& users_csv,
                  std::size_t window, std::size_t top, bool allow_coldstart,
                  const std::string& tensor_prefix, const std::string& out_path) {
    dcpf::FittedModel model = load_model_with_ids(model_path);

    std::vector<bool> train_seen;
    if (!tensor_prefix.empty()) {
        dcpf::InteractionTensor tensor = load_tensor_with_ids(tensor_prefix);
        train_seen.assign(model.num_users() * model.num_items(), false);
        for (const dcpf::Cell& c : tensor.cells()) {
            if (c.user < model.num_users() && c.item < model.num_items() &&
                c.window < model.train_windows())
                train_seen[c.user * model.num_items() + c.item] = true;
        }
    }

    std::ostringstream body;
    for (const std::string& user_id : split_list(users_csv)) {
        auto mi = model.users.get(user_id);
        if (!mi && !allow_coldstart) {
            body << user_id << " ERROR unknown-user\n";
            continue;
        }
        std::vector<std::pair<std::size_t, double>> candidates;
        candidates.reserve(model.num_items());
        for (std::size_t n = 0; n < model.num_items(); ++n) {
            if (!train_seen.empty() && mi &&
                train_seen[*mi * model.num_items() + n])
                continue;
            double expected =
                mi ? dcpf::score(model, *mi, n, window).expected_rating
                   : dcpf::score_by_id(model, user_id, model.items.lookup(n), window)
                         .expected_rating;
            candidates.emplace_back(n, expected);
        }
        dcpf::RankedList ranked = dcpf::rank_items(mi.value_or(0), window,
                                                   std::move(candidates));
        for (std::size_t r = 0; r < std::min(top, ranked.items.size()); ++r)
            body << user_id << ' ' << (r + 1) << ' '
                 << model.items.lookup(ranked.items[r]) << ' '
                 << dcpf::format_double(ranked.scores[r]) << '\n';
    }

    if (out_path.empty()) {
        std::cout << body.str();
    } else {
        OutputSet outputs;
        auto out = outputs.open(out_path);
        out << body.str();
        outputs.commit();
    }
    return 0;
}

int cmd_inspect_chains(const std::string& model_path, const std::string& users_csv,
                       const std::string& items_csv, const std::string& out_path) {
    dcpf::FittedModel model = load_model_with_ids(model_path);
    double user_ratio = dcpf::drift_ratio(model.user_hyper);
    double item_ratio = dcpf::drift_ratio(model.item_hyper);

    std::ostringstream body;
    auto dump_side = [&](const std::string& csv, const dcpf::IdMap& map,
                         const dcpf::GammaSlab& state, const dcpf::GammaSlab& aux,
                         double ratio) {
        std::string label = dcpf::classify_drift(ratio);
        for (const std::string& id : split_list(csv)) {
            auto e = map.get(id);
            if (!e) {
                body << id << " ERROR unknown-entity\n";
                continue;
            }
            for (std::size_t k = 0; k < state.components; ++k)
                for (std::size_t t = 0; t < state.windows; ++t)
                    body << id << ' ' << k << ' ' << t << ' '
                         << dcpf::format_double(state.mean(*e, k, t)) << ' '
                         << dcpf::format_double(aux.mean(*e, k, t)) << ' ' << label
                         << '\n';
        }
    };
    dump_side(users_csv, model.users, model.params.user_state, model.params.user_aux,
              user_ratio);
    dump_side(items_csv, model.items, model.params.item_state, model.params.item_aux,
              item_ratio);

    if (out_path.empty()) {
        std::cout << body.str();
    } else {
        OutputSet outputs;
        auto out = outputs.open(out_path);
        out << body.str();
        outputs.commit();
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dynamic compound Poisson factorization toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Read options from an ini/toml config file");

    // --- simulate
    auto* sim = app.add_subcommand("simulate",
                                   "Sample a synthetic dataset from the generative model");
    std::string sim_out;
    dcpf::GeneratorConfig gen;
    double sim_state_shape = 12.0, sim_aux_shape = 12.0, sim_state_rate = 1.0,
           sim_aux_rate = 1.0, sim_init_shape = 1.0, sim_factor_mean = 0.0;
    std::string sim_element = "ga";
    double sim_theta = -1.0, sim_kappa = 1.0;
    std::size_t sim_holdout = 2;
    double sim_val_frac = 0.05;
    bool sim_no_truth = false;
    sim->add_option("--out", sim_out, "Output file prefix")->required();
    sim->add_option("--users", gen.num_users, "Number of users")->capture_default_str();
    sim->add_option("--items", gen.num_items, "Number of items")->capture_default_str();
    sim->add_option("--k", gen.num_components, "Latent components")
        ->capture_default_str();
    sim->add_option("--windows", gen.num_windows, "Time windows")->capture_default_str();
    sim->add_option("--element", sim_element, "Element family {po, ga, n, ztp}")
        ->capture_default_str();
    sim->add_option("--theta", sim_theta, "Element natural parameter")
        ->capture_default_str();
    sim->add_option("--kappa", sim_kappa, "Element dispersion")->capture_default_str();
    sim->add_option("--state-shape", sim_state_shape, "Chain state-draw shape")
        ->capture_default_str();
    sim->add_option("--aux-shape", sim_aux_shape, "Chain auxiliary-draw shape")
        ->capture_default_str();
    sim->add_option("--state-rate", sim_state_rate, "Chain state rate multiplier")
        ->capture_default_str();
    sim->add_option("--aux-rate", sim_aux_rate, "Chain auxiliary rate multiplier")
        ->capture_default_str();
    sim->add_option("--init-shape", sim_init_shape, "Initial-rate draw shape")
        ->capture_default_str();
    sim->add_option("--factor-mean", sim_factor_mean,
                    "Mean factor scale (default sqrt(0.5/K))");
    sim->add_option("--holdout", sim_holdout,
                    "Trailing windows for the emitted split manifest")
        ->capture_default_str();
    sim->add_option("--val-frac", sim_val_frac, "Validation fraction of held-out cells")
        ->capture_default_str();
    sim->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
    sim->add_option("--budget", gen.max_expected_events,
                    "Expected latent-event budget")
        ->capture_default_str();
    sim->add_flag("--no-truth", sim_no_truth, "Skip the ground-truth file");

    // --- prepare
    auto* prep = app.add_subcommand("prepare",
                                    "Discretize rating events and write the canonical "
                                    "tensor, id maps and split manifest");
    std::string prep_input, prep_out;
    std::string prep_delim = ",";
    bool prep_header = false;
    dcpf::ColumnSchema prep_schema;
    bool prep_no_value = false;
    std::size_t prep_windows = 0;
    std::int64_t prep_window_length = 0;
    std::string prep_dedup = "auto";
    std::string prep_kind = "count";
    bool prep_active = false;
    dcpf::ActiveFilter prep_filter;
    std::size_t prep_holdout = 2;
    double prep_val_frac = 0.05;
    std::uint64_t prep_seed = 1;
    double prep_malformed = 0.01;
    prep->add_option("--input", prep_input, "Delimiter-separated events file")
        ->required();
    prep->add_option("--out", prep_out, "Output file prefix")->required();
    prep->add_option("--delimiter", prep_delim, "Field delimiter")
        ->capture_default_str();
    prep->add_flag("--header", prep_header, "Skip the first line");
    prep->add_option("--col-user", prep_schema.user, "User column index")
        ->capture_default_str();
    prep->add_option("--col-item", prep_schema.item, "Item column index")
        ->capture_default_str();
    prep->add_option("--col-time", prep_schema.timestamp, "Timestamp column index")
        ->capture_default_str();
    prep->add_option("--col-value", prep_schema.value, "Value column index")
        ->capture_default_str();
    prep->add_flag("--no-value", prep_no_value,
                   "No value column; every event counts as 1");
    prep->add_option("--malformed-threshold", prep_malformed,
                     "Abort when this fraction of lines is malformed")
        ->capture_default_str();
    prep->add_option("--windows", prep_windows,
                     "Number of equal-width windows (overrides --window-length)");
    prep->add_option("--window-length", prep_window_length,
                     "Window length in timestamp units");
    prep->add_option("--dedup", prep_dedup,
                     "Within-window duplicates {auto, sum, keep_first, keep_last}")
        ->capture_default_str();
    prep->add_option("--ratings", prep_kind,
                     "Ratings kind {count, stars, binary}; picks the auto dedup policy")
        ->capture_default_str();
    prep->add_flag("--active", prep_active,
                   "Keep only entities active near both horizon ends");
    prep->add_option("--min-events", prep_filter.min_events,
                     "Active filter: minimum events per entity")
        ->capture_default_str();
    prep->add_option("--presence-fraction", prep_filter.presence_fraction,
                     "Active filter: edge window fraction")
        ->capture_default_str();
    prep->add_option("--holdout", prep_holdout, "Trailing windows held out")
        ->capture_default_str();
    prep->add_option("--val-frac", prep_val_frac,
                     "Validation fraction of held-out cells")
        ->capture_default_str();
    prep->add_option("--seed", prep_seed, "Random seed")->capture_default_str();

    // --- train
    auto* train = app.add_subcommand("train", "Fit a model on a prepared tensor");
    std::string train_tensor, train_out;
    dcpf::FitConfig fit_config;
    HyperFlags train_hyper;
    std::string train_element = "ga";
    std::string train_on = "nonmissing", validation_on = "nonmissing";
    bool train_static = false, train_full_batch = false, train_dump = false;
    std::string train_static_dedup = "keep_first";
    train->add_option("--tensor", train_tensor, "Prepared tensor prefix");
    train->add_option("--out", train_out, "Model output path");
    train->add_option("--element", train_element, "Element family {po, ga, n, ztp}")
        ->capture_default_str();
    train->add_option("--k", fit_config.num_components, "Latent components")
        ->capture_default_str();
    train->add_option("--tau", fit_config.learning_delay, "Learning-rate delay")
        ->capture_default_str();
    train->add_option("--xi", fit_config.learning_power, "Learning-rate power")
        ->capture_default_str();
    add_hyper_flags(train, train_hyper);
    train->add_option("--max-epochs", fit_config.max_epochs, "Epoch cap")
        ->capture_default_str();
    train->add_option("--tol", fit_config.convergence_tol,
                      "Relative validation-likelihood convergence tolerance")
        ->capture_default_str();
    train->add_option("--batch", fit_config.batch_size, "Items sampled per user block")
        ->capture_default_str();
    train->add_flag("--full-batch", train_full_batch,
                    "Exact alternating sweeps with step size 1");
    train->add_option("--train-on", train_on, "Cells used in updates {nonmissing, full}")
        ->capture_default_str();
    train->add_option("--validation-on", validation_on,
                      "Validation likelihood mode {nonmissing, full}")
        ->capture_default_str();
    train->add_flag("--static", train_static,
                    "Collapse training windows to a single-window static ablation");
    train->add_option("--static-dedup", train_static_dedup,
                      "Cross-window dedup for --static {keep_first, keep_last}")
        ->capture_default_str();
    train->add_option("--mle-sample", fit_config.mle_sample_size,
                      "Nonzero sample size for the element fit")
        ->capture_default_str();
    train->add_option("--eta-max", fit_config.eta_max,
                      "Initial latent-count truncation")
        ->capture_default_str();
    train->add_option("--seed", fit_config.seed, "Random seed")->capture_default_str();
    train->add_option("--threads", fit_config.threads, "Worker threads")
        ->capture_default_str();
    train->add_flag("--dump-defaults", train_dump,
                    "Print the resolved default configuration and exit");

    // --- evaluate
    auto* eval = app.add_subcommand("evaluate", "Score a model on the held-out split");
    std::string eval_model, eval_tensor, eval_out;
    std::string eval_metrics = "auc,prec@10,prec@100,ndcg@10,ndcg@100,loglik";
    std::string eval_negatives = "auto";
    bool eval_include_train = false;
    std::string eval_roc, eval_per_user;
    std::uint64_t eval_seed = 1;
    std::size_t eval_threads = 1;
    eval->add_option("--model", eval_model, "Model file")->required();
    eval->add_option("--tensor", eval_tensor, "Prepared tensor prefix")->required();
    eval->add_option("--out", eval_out, "Report output path")->required();
    eval->add_option("--metrics", eval_metrics, "Comma list of metrics")
        ->capture_default_str();
    eval->add_option("--negatives", eval_negatives,
                     "Negative handling {auto, all, sampled:N}")
        ->capture_default_str();
    eval->add_flag("--include-train", eval_include_train,
                   "Keep training-seen items in per-user rankings");
    eval->add_option("--roc", eval_roc, "Write ROC coordinates to this path");
    eval->add_option("--per-user", eval_per_user, "Write per-user metric rows");
    eval->add_option("--seed", eval_seed, "Random seed")->capture_default_str();
    eval->add_option("--threads", eval_threads, "Worker threads")
        ->capture_default_str();

    // --- recommend
    auto* rec = app.add_subcommand("recommend", "Top-L items for the given users");
    std::string rec_model, rec_users, rec_tensor, rec_out;
    std::size_t rec_window = 0, rec_top = 10;
    bool rec_coldstart = false;
    rec->add_option("--model", rec_model, "Model file")->required();
    rec->add_option("--users", rec_users, "Comma list of user ids")->required();
    rec->add_option("--window", rec_window, "Window index (may exceed the horizon)")
        ->capture_default_str();
    rec->add_option("--top", rec_top, "List length")->capture_default_str();
    rec->add_flag("--allow-coldstart", rec_coldstart,
                  "Score unknown users with population-mean factors");
    rec->add_option("--tensor", rec_tensor,
                    "Prepared tensor prefix for training-seen exclusion");
    rec->add_option("--out", rec_out, "Output path (stdout when absent)");

    // --- inspect-chains
    auto* inspect = app.add_subcommand("inspect-chains",
                                       "Dump fitted factor trajectories");
    std::string ins_model, ins_users, ins_items, ins_out;
    inspect->add_option("--model", ins_model, "Model file")->required();
    inspect->add_option("--users", ins_users, "Comma list of user ids");
    inspect->add_option("--items", ins_items, "Comma list of item ids");
    inspect->add_option("--out", ins_out, "Output path (stdout when absent)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (sim->parsed()) {
            gen.element = dcpf::ElementDistribution{
                dcpf::family_from_name(sim_element), sim_theta, sim_kappa};
            double mean = sim_factor_mean > 0.0
                              ? sim_factor_mean
                              : std::sqrt(0.5 / double(gen.num_components));
            gen.user_hyper = dcpf::ChainHyper{sim_state_shape, sim_aux_shape,
                                              sim_state_rate, sim_aux_rate,
                                              sim_init_shape, mean};
            gen.item_hyper = gen.user_hyper;
            return cmd_simulate(sim_out, gen, sim_holdout, sim_val_frac,
                                !sim_no_truth);
        }
        if (prep->parsed()) {
            dcpf::ParseOptions opts;
            if (prep_delim.size() != 1)
                throw std::invalid_argument("--delimiter must be one character");
            opts.delimiter = prep_delim[0];
            opts.has_header = prep_header;
            opts.schema = prep_schema;
            if (prep_no_value) opts.schema.value = -1;
            opts.malformed_threshold = prep_malformed;
            if (prep_windows == 0 && prep_window_length <= 0)
                throw std::invalid_argument(
                    "prepare needs --windows or --window-length");
            return cmd_prepare(prep_input, prep_out, opts, prep_windows,
                               prep_window_length, prep_dedup, prep_kind, prep_active,
                               prep_filter, prep_holdout, prep_val_frac, prep_seed);
        }
        if (train->parsed()) {
            fit_config.family = dcpf::family_from_name(train_element);
            fit_config.user_hyper = train_hyper.to_hyper();
            fit_config.item_hyper = train_hyper.to_hyper();
            fit_config.train_on = dcpf::train_on_from_name(train_on);
            fit_config.validation_on = dcpf::train_on_from_name(validation_on);
            fit_config.full_batch = train_full_batch;
            if (train_dump) {
                dump_train_defaults(fit_config, train_hyper, std::cout);
                return 0;
            }
            if (train_tensor.empty() || train_out.empty()) {
                std::cerr << "train: --tensor and --out are required" << std::endl;
                return 1;
            }
            return cmd_train(train_tensor, train_out, fit_config, train_static,
                             train_static_dedup);
        }
        if (eval->parsed())
            return cmd_evaluate(eval_model, eval_tensor, eval_out, eval_metrics,
                                eval_negatives, !eval_include_train, eval_roc,
                                eval_per_user, eval_seed, eval_threads);
        if (rec->parsed())
            return cmd_recommend(rec_model, rec_users, rec_window, rec_top,
                                 rec_coldstart, rec_tensor, rec_out);
        if (inspect->parsed())
            return cmd_inspect_chains(ins_model, ins_users, ins_items, ins_out);
    } catch (const missing_input& e) {
        std::cerr << "error: input file '" << e.path << "' does not exist"
                  << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 1;
}
