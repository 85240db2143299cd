#include <catch2/catch.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dcpf/dcpf.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
    int status = -1;
    std::string out;
};

fs::path scratch_dir() {
    static const fs::path dir = [] {
        fs::path p = fs::temp_directory_path() /
                     ("dcpf-cli-test-" + std::to_string(::getpid()));
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

CliResult run_cli(const std::string& args) {
    fs::path out_file = scratch_dir() / "stdout.txt";
    std::string cmd = std::string(DCPF_CLI_PATH) + " " + args + " > " +
                      out_file.string() + " 2> " + (scratch_dir() / "stderr.txt").string();
    int raw = std::system(cmd.c_str());
    CliResult result;
    result.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    std::ifstream in(out_file);
    std::stringstream buf;
    buf << in.rdbuf();
    result.out = buf.str();
    return result;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// a small event file with repeat interactions and drifting activity
void write_events_csv(const fs::path& path, std::uint64_t seed) {
    dcpf::GeneratorConfig gen;
    gen.num_users = 25;
    gen.num_items = 20;
    gen.num_components = 2;
    gen.num_windows = 6;
    gen.user_hyper = dcpf::simulator_chain_defaults(2, 1.0);
    gen.item_hyper = dcpf::simulator_chain_defaults(2, 1.0);
    gen.element = {dcpf::Family::poisson, 0.3, 1.0};
    gen.seed = seed;
    dcpf::SyntheticDataset data = dcpf::generate(gen);
    std::ofstream out(path);
    dcpf::write_tensor_as_events(data.tensor, out);
}

}  // namespace

TEST_CASE("cli: missing input exits with code 2 naming the path") {
    CliResult r = run_cli("prepare --input /nonexistent/events.csv --out " +
                          (scratch_dir() / "x").string() + " --windows 4");
    REQUIRE(r.status == 2);
    std::string err = slurp(scratch_dir() / "stderr.txt");
    REQUIRE(err.find("/nonexistent/events.csv") != std::string::npos);
}

TEST_CASE("cli: dump-defaults carries the documented configuration") {
    CliResult r = run_cli("train --dump-defaults");
    REQUIRE(r.status == 0);
    REQUIRE(r.out.find("k 70\n") != std::string::npos);
    REQUIRE(r.out.find("tau 10000\n") != std::string::npos);
    REQUIRE(r.out.find("xi 0.7\n") != std::string::npos);
    REQUIRE(r.out.find("user.aux_shape 1.01\n") != std::string::npos);
    REQUIRE(r.out.find("item.state_shape 1.01\n") != std::string::npos);
    REQUIRE(r.out.find("user.state_rate 1\n") != std::string::npos);
    REQUIRE(r.out.find("item.aux_rate 1\n") != std::string::npos);
    REQUIRE(r.out.find("init_mean_rule sqrt(E[eta]/K)\n") != std::string::npos);
}

TEST_CASE("cli: full pipeline runs and is byte-identical across reruns") {
    fs::path dir = scratch_dir();
    write_events_csv(dir / "events.csv", 77);

    // identical paths on both runs: the model header references its own
    // id-map file names
    auto pipeline = [&]() {
        std::string prefix = (dir / "data").string();
        std::string model = (dir / "model").string();
        std::string report = (dir / "report").string();
        CliResult prep = run_cli("prepare --input " + (dir / "events.csv").string() +
                                 " --out " + prefix +
                                 " --windows 6 --holdout 2 --val-frac 0.1 --seed 3");
        REQUIRE(prep.status == 0);
        CliResult train = run_cli(
            "train --tensor " + prefix + " --out " + model +
            " --element po --k 3 --tau 10 --max-epochs 6 --batch 8 --seed 5");
        REQUIRE(train.status == 0);
        CliResult eval = run_cli("evaluate --model " + model + " --tensor " + prefix +
                                 " --out " + report + " --seed 7 --roc " + report +
                                 ".roc");
        REQUIRE(eval.status == 0);
        return slurp(prefix + ".tensor") + slurp(prefix + ".split") + slurp(model) +
               slurp(model + ".log") + slurp(report) + slurp(report + ".roc");
    };
    std::string first = pipeline();
    std::string second = pipeline();
    REQUIRE(first == second);
}

TEST_CASE("cli: simulate is deterministic and static training works") {
    fs::path dir = scratch_dir();
    std::string p1 = (dir / "sim1").string();
    std::string p2 = (dir / "sim2").string();
    std::string args =
        " --users 15 --items 12 --k 2 --windows 5 --element ga --theta -1 "
        "--holdout 1 --val-frac 0.1 --seed 11";
    REQUIRE(run_cli("simulate --out " + p1 + args).status == 0);
    REQUIRE(run_cli("simulate --out " + p2 + args).status == 0);
    REQUIRE(slurp(p1 + ".tensor") == slurp(p2 + ".tensor"));
    REQUIRE(slurp(p1 + ".truth") == slurp(p2 + ".truth"));

    // a static ablation trains a single-window model on the same split
    std::string model = (dir / "static_model").string();
    CliResult train = run_cli("train --tensor " + p1 + " --out " + model +
                              " --static --element ga --k 2 --tau 5 " +
                              "--max-epochs 4 --batch 6 --seed 2");
    REQUIRE(train.status == 0);
    auto min = std::ifstream(model, std::ios::binary);
    dcpf::ModelFileRefs refs;
    dcpf::FittedModel fitted = dcpf::read_model(min, &refs);
    REQUIRE(fitted.train_windows() == 1);
}

TEST_CASE("cli: recommend emits ranked rows with original ids") {
    fs::path dir = scratch_dir();
    std::string prefix = (dir / "recdata").string();
    std::string model = (dir / "recmodel").string();
    REQUIRE(run_cli("simulate --out " + prefix +
                    " --users 10 --items 8 --k 2 --windows 4 --element ga "
                    "--theta -1 --holdout 1 --val-frac 0.1 --seed 21")
                .status == 0);
    REQUIRE(run_cli("train --tensor " + prefix + " --out " + model +
                    " --element ga --k 2 --tau 5 --max-epochs 3 --batch 4 --seed 1")
                .status == 0);

    CliResult top1 = run_cli("recommend --model " + model +
                             " --users u1,u2,ghost --window 3 --top 1");
    REQUIRE(top1.status == 0);
    std::istringstream rows(top1.out);
    std::string line;
    std::size_t u1_rows = 0, ghost_errors = 0;
    while (std::getline(rows, line)) {
        if (line.rfind("u1 ", 0) == 0) ++u1_rows;
        if (line.rfind("ghost ERROR", 0) == 0) ++ghost_errors;
    }
    REQUIRE(u1_rows == 1);
    REQUIRE(ghost_errors == 1);

    CliResult top5 = run_cli("recommend --model " + model +
                             " --users u3 --window 3 --top 5");
    REQUIRE(top5.status == 0);
    std::istringstream rows5(top5.out);
    double prev = std::numeric_limits<double>::infinity();
    std::size_t count = 0;
    while (std::getline(rows5, line)) {
        std::istringstream fields(line);
        std::string user, item;
        std::size_t rank;
        double score;
        REQUIRE((fields >> user >> rank >> item >> score));
        REQUIRE(user == "u3");
        REQUIRE(rank == ++count);
        REQUIRE(score <= prev);
        prev = score;
    }
    REQUIRE(count == 5);

    CliResult cold = run_cli("recommend --model " + model +
                             " --users ghost --window 3 --top 2 --allow-coldstart");
    REQUIRE(cold.status == 0);
    REQUIRE(cold.out.find("ghost 1 ") == 0);
}

TEST_CASE("cli: inspect-chains dumps the fitted trajectories exactly") {
    fs::path dir = scratch_dir();
    std::string prefix = (dir / "insdata").string();
    std::string model = (dir / "insmodel").string();
    REQUIRE(run_cli("simulate --out " + prefix +
                    " --users 12 --items 8 --k 2 --windows 4 --element ga "
                    "--theta -1 --factor-mean 1 --holdout 1 --val-frac 0.2 "
                    "--seed 31")
                .status == 0);
    REQUIRE(run_cli("train --tensor " + prefix + " --out " + model +
                    " --element ga --k 2 --tau 5 --max-epochs 2 --batch 4 --seed 1")
                .status == 0);

    CliResult r = run_cli("inspect-chains --model " + model + " --users u2 --items i0,nope");
    REQUIRE(r.status == 0);

    auto min = std::ifstream(model, std::ios::binary);
    dcpf::ModelFileRefs refs;
    dcpf::FittedModel fitted = dcpf::read_model(min, &refs);
    std::size_t T = fitted.train_windows();

    std::istringstream rows(r.out);
    std::string line;
    std::size_t u2_rows = 0;
    bool saw_error_row = false;
    while (std::getline(rows, line)) {
        std::istringstream fields(line);
        std::string id;
        fields >> id;
        if (id == "nope") {
            saw_error_row = line.find("ERROR") != std::string::npos;
            continue;
        }
        std::size_t k, t;
        double e_state, e_aux;
        std::string drift;
        REQUIRE((fields >> k >> t >> e_state >> e_aux >> drift));
        REQUIRE(drift == "balanced");  // default hyperparameters
        if (id == "u2") {
            ++u2_rows;
            std::size_t e = 2;  // synthetic ids are positional
            REQUIRE(e_state ==
                    Approx(fitted.params.user_state.mean(e, k, t)).epsilon(1e-12));
            REQUIRE(e_aux ==
                    Approx(fitted.params.user_aux.mean(e, k, t)).epsilon(1e-12));
        }
    }
    REQUIRE(u2_rows == 2 * T);
    REQUIRE(saw_error_row);
}
