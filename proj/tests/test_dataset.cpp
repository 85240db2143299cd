#include <catch2/catch.hpp>

#include <map>
#include <random>
#include <sstream>
#include <tuple>

#include "dcpf/dataset.hpp"

using namespace dcpf;

namespace {

using CellKey = std::tuple<std::string, std::string, std::size_t>;

std::map<CellKey, double> cells_by_id(const InteractionTensor& tensor) {
    std::map<CellKey, double> out;
    for (const Cell& c : tensor.cells())
        out[{tensor.users.lookup(c.user), tensor.items.lookup(c.item), c.window}] =
            c.value;
    return out;
}

std::vector<RatingEvent> random_events(std::uint64_t seed, std::size_t count,
                                       std::size_t users, std::size_t items,
                                       std::int64_t horizon) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick_u(0, users - 1);
    std::uniform_int_distribution<std::size_t> pick_i(0, items - 1);
    std::uniform_int_distribution<std::int64_t> pick_t(0, horizon - 1);
    std::uniform_int_distribution<int> pick_y(1, 5);
    std::vector<RatingEvent> events;
    events.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        events.push_back({"u" + std::to_string(pick_u(rng)),
                          "i" + std::to_string(pick_i(rng)), pick_t(rng),
                          double(pick_y(rng))});
    return events;
}

}  // namespace

TEST_CASE("parse_events maps fields and defaults the value") {
    std::istringstream in("u1,i7,1040000000,4\nu1,i7,1040000000\n");
    ParseResult result = parse_events(in);
    REQUIRE(result.events.size() == 2);
    REQUIRE(result.events[0].user_id == "u1");
    REQUIRE(result.events[0].item_id == "i7");
    REQUIRE(result.events[0].timestamp == 1040000000);
    REQUIRE(result.events[0].value == 4.0);
    REQUIRE(result.events[1].value == 1.0);  // binary default
    REQUIRE(result.malformed.empty());
}

TEST_CASE("parse_events on an empty stream") {
    std::istringstream in("");
    ParseResult result = parse_events(in);
    REQUIRE(result.events.empty());
    REQUIRE(result.malformed.empty());
}

TEST_CASE("parse_events reports malformed lines and aborts over the threshold") {
    std::istringstream good("u1,i1,100,1\nu2,bad-line\nu3,i3,300,2\n");
    ParseOptions opts;
    opts.malformed_threshold = 0.5;
    ParseResult result = parse_events(good, opts);
    REQUIRE(result.events.size() == 2);
    REQUIRE(result.malformed.size() == 1);
    REQUIRE(result.malformed[0].line_number == 2);

    std::istringstream bad("u1,i1,100,1\nu2,oops\nu3,nope\n");
    REQUIRE_THROWS_AS(parse_events(bad), parse_error);

    std::istringstream badts("u1,i1,notatime,1\n");
    REQUIRE_THROWS_AS(parse_events(badts), parse_error);
}

TEST_CASE("parse_events schema handling") {
    ParseOptions opts;
    opts.schema.user = -1;
    std::istringstream in("a,b,c\n");
    REQUIRE_THROWS_AS(parse_events(in, opts), schema_error);

    ParseOptions reorder;
    reorder.schema = {1, 0, 2, -1};
    reorder.has_header = true;
    std::istringstream in2("item,user,time\ni9,u4,500\n");
    ParseResult result = parse_events(in2, reorder);
    REQUIRE(result.events.size() == 1);
    REQUIRE(result.events[0].user_id == "u4");
    REQUIRE(result.events[0].item_id == "i9");
    REQUIRE(result.events[0].value == 1.0);
}

TEST_CASE("discretize buckets the netflix-style horizon into 16 windows") {
    // 1998-10-01 through 2005-12-31
    std::int64_t lo = 907200000, hi = 1135987200;
    TimeGrid grid = TimeGrid::with_num_windows(lo, hi, 16);
    REQUIRE(grid.num_windows == 16);
    REQUIRE(grid.window_index(lo) == 0);
    REQUIRE(grid.window_index(hi) == 15);
    // contiguous coverage with no gaps
    for (std::size_t t = 0; t < 16; ++t) {
        REQUIRE(grid.window_index(grid.window_start(t)) == t);
        if (t > 0) REQUIRE(grid.window_index(grid.window_start(t) - 1) == t - 1);
    }

    std::vector<RatingEvent> events = {{"a", "x", lo, 2.0}, {"b", "y", hi, 3.0}};
    InteractionTensor tensor = discretize(events, grid, DedupPolicy::sum);
    REQUIRE(tensor.num_windows() == 16);
    REQUIRE(tensor.nnz() == 2);
}

TEST_CASE("discretize single event and the sum policy") {
    TimeGrid grid{0, 10, 4};
    std::vector<RatingEvent> one = {{"u", "i", 17, 2.5}};
    InteractionTensor tensor = discretize(one, grid, DedupPolicy::sum);
    REQUIRE(tensor.nnz() == 1);
    REQUIRE(tensor.cells()[0].window == 1);
    REQUIRE(tensor.cells()[0].value == 2.5);

    std::vector<RatingEvent> dup = {{"u", "i", 17, 2.0}, {"u", "i", 12, 3.0}};
    InteractionTensor summed = discretize(dup, grid, DedupPolicy::sum);
    REQUIRE(summed.nnz() == 1);
    REQUIRE(summed.cells()[0].value == 5.0);

    InteractionTensor first = discretize(dup, grid, DedupPolicy::keep_first);
    REQUIRE(first.cells()[0].value == 3.0);  // earlier timestamp wins
    InteractionTensor last = discretize(dup, grid, DedupPolicy::keep_last);
    REQUIRE(last.cells()[0].value == 2.0);

    std::vector<RatingEvent> out_of_range = {{"u", "i", 40, 1.0}};
    REQUIRE_THROWS_AS(discretize(out_of_range, grid, DedupPolicy::sum), range_error);

    // zero-valued aggregates are dropped
    std::vector<RatingEvent> zeros = {{"u", "i", 17, 2.0}, {"u", "i", 12, -2.0}};
    REQUIRE(discretize(zeros, grid, DedupPolicy::sum).nnz() == 0);
}

TEST_CASE("window assignment invariant over random events") {
    std::vector<RatingEvent> events = random_events(3, 500, 20, 20, 1000);
    TimeGrid grid = TimeGrid::with_num_windows(0, 999, 7);
    for (const RatingEvent& ev : events) {
        std::size_t t = grid.window_index(ev.timestamp);
        REQUIRE(grid.window_start(t) <= ev.timestamp);
        REQUIRE(ev.timestamp < grid.window_start(t + 1));
    }
}

TEST_CASE("dedup_across_windows keeps the requested instance") {
    TimeGrid grid{0, 1, 6};
    std::vector<RatingEvent> events = {{"m", "n", 1, 2.0}, {"m", "n", 5, 7.0}};
    InteractionTensor tensor = discretize(events, grid, DedupPolicy::sum);
    REQUIRE(tensor.nnz() == 2);

    InteractionTensor first = dedup_across_windows(tensor, CrossWindowPolicy::keep_first);
    REQUIRE(first.nnz() == 1);
    REQUIRE(first.cells()[0].window == 1);
    REQUIRE(first.cells()[0].value == 2.0);

    InteractionTensor last = dedup_across_windows(tensor, CrossWindowPolicy::keep_last);
    REQUIRE(last.cells()[0].window == 5);
    REQUIRE(last.cells()[0].value == 7.0);

    InteractionTensor none = dedup_across_windows(tensor, CrossWindowPolicy::none);
    REQUIRE(cells_by_id(none) == cells_by_id(tensor));

    // a pair that appears once is unchanged under any policy
    std::vector<RatingEvent> single = {{"m", "n", 3, 4.0}};
    InteractionTensor one = discretize(single, grid, DedupPolicy::sum);
    REQUIRE(cells_by_id(dedup_across_windows(one, CrossWindowPolicy::keep_first)) ==
            cells_by_id(one));
    REQUIRE(cells_by_id(dedup_across_windows(one, CrossWindowPolicy::keep_last)) ==
            cells_by_id(one));
}

TEST_CASE("collapse_to_static requires deduplicated pairs") {
    TimeGrid grid{0, 1, 4};
    std::vector<RatingEvent> events = {{"m", "n", 0, 2.0}, {"m", "n", 3, 7.0}};
    InteractionTensor tensor = discretize(events, grid, DedupPolicy::sum);
    REQUIRE_THROWS(collapse_to_static(tensor));
    InteractionTensor collapsed =
        collapse_to_static(dedup_across_windows(tensor, CrossWindowPolicy::keep_first));
    REQUIRE(collapsed.num_windows() == 1);
    REQUIRE(collapsed.nnz() == 1);
    REQUIRE(collapsed.cells()[0].window == 0);
}

TEST_CASE("split_by_time partitions and is reproducible") {
    std::vector<RatingEvent> events = random_events(5, 800, 30, 25, 1600);
    TimeGrid grid = TimeGrid::with_num_windows(0, 1599, 16);
    InteractionTensor tensor = discretize(events, grid, DedupPolicy::sum);

    DataSplit split = split_by_time(tensor, 2, 0.05, 99);
    REQUIRE(split.train.num_windows() == 14);
    for (const Cell& c : split.train.cells()) REQUIRE(c.window < 14);
    for (const Cell& c : split.validation.cells()) REQUIRE(c.window >= 14);
    for (const Cell& c : split.test.cells()) REQUIRE(c.window >= 14);

    std::size_t held_out = split.validation.nnz() + split.test.nnz();
    REQUIRE(split.validation.nnz() ==
            std::size_t(std::floor(0.05 * double(held_out) + 0.5)));

    // partition: train + validation + test equals the tensor exactly
    auto all = cells_by_id(split.train);
    for (const auto& [key, value] : cells_by_id(split.validation)) {
        REQUIRE(all.count(key) == 0);
        all[key] = value;
    }
    for (const auto& [key, value] : cells_by_id(split.test)) {
        REQUIRE(all.count(key) == 0);
        all[key] = value;
    }
    REQUIRE(all == cells_by_id(tensor));

    // determinism and the f = 0 boundary
    DataSplit again = split_by_time(tensor, 2, 0.05, 99);
    REQUIRE(cells_by_id(again.validation) == cells_by_id(split.validation));
    DataSplit no_val = split_by_time(tensor, 2, 0.0, 99);
    REQUIRE(no_val.validation.nnz() == 0);
    REQUIRE(no_val.test.nnz() == held_out);

    REQUIRE_THROWS_AS(split_by_time(tensor, 16, 0.05, 1), split_error);
    REQUIRE_THROWS_AS(split_by_time(tensor, 0, 0.05, 1), split_error);
}

TEST_CASE("per-window sparsity matches a brute-force count") {
    std::vector<RatingEvent> events = random_events(8, 300, 12, 9, 500);
    TimeGrid grid = TimeGrid::with_num_windows(0, 499, 5);
    InteractionTensor tensor = discretize(events, grid, DedupPolicy::sum);
    for (std::size_t t = 0; t < 5; ++t) {
        std::size_t count = 0;
        for (const Cell& c : tensor.cells())
            if (c.window == t) ++count;
        REQUIRE(tensor.nnz_in_window(t) == count);
        double want = 1.0 - double(count) /
                                double(tensor.num_users() * tensor.num_items());
        REQUIRE(tensor.sparsity(t) == Approx(want));
    }
}

TEST_CASE("event round trip reproduces the tensor") {
    std::vector<RatingEvent> events = random_events(13, 600, 18, 14, 900);
    TimeGrid grid = TimeGrid::with_num_windows(0, 899, 9);
    InteractionTensor tensor = discretize(events, grid, DedupPolicy::sum);

    std::ostringstream serialized;
    write_tensor_as_events(tensor, serialized);
    std::istringstream in(serialized.str());
    ParseResult parsed = parse_events(in);
    REQUIRE(parsed.malformed.empty());
    InteractionTensor round = discretize(parsed.events, grid, DedupPolicy::sum);
    REQUIRE(cells_by_id(round) == cells_by_id(tensor));
}

TEST_CASE("tensor file and id maps round trip") {
    std::vector<RatingEvent> events = random_events(21, 400, 15, 11, 700);
    TimeGrid grid = TimeGrid::with_num_windows(0, 699, 7);
    InteractionTensor tensor = discretize(events, grid, DedupPolicy::sum);

    std::ostringstream tf, uf, itf;
    write_tensor(tensor, tf);
    write_id_map(tensor.users, uf);
    write_id_map(tensor.items, itf);

    std::istringstream tin(tf.str()), uin(uf.str()), iin(itf.str());
    InteractionTensor loaded = read_tensor(tin);
    attach_id_maps(loaded, read_id_map(uin), read_id_map(iin));
    REQUIRE(cells_by_id(loaded) == cells_by_id(tensor));

    std::istringstream bad("DCPF-TENSOR v2\n1 1 1\n");
    REQUIRE_THROWS_AS(read_tensor(bad), io_error);
}

TEST_CASE("split manifest round trip") {
    std::vector<RatingEvent> events = random_events(34, 500, 20, 16, 800);
    TimeGrid grid = TimeGrid::with_num_windows(0, 799, 8);
    InteractionTensor tensor = discretize(events, grid, DedupPolicy::sum);
    DataSplit split = split_by_time(tensor, 2, 0.1, 7);

    std::ostringstream out;
    write_split_manifest(split, "data.tensor", out);
    std::istringstream in(out.str());
    SplitManifest manifest = read_split_manifest(in);
    REQUIRE(manifest.tensor_file == "data.tensor");
    REQUIRE(manifest.held_out_windows == 2);

    DataSplit rebuilt = apply_split_manifest(tensor, manifest);
    REQUIRE(cells_by_id(rebuilt.train) == cells_by_id(split.train));
    REQUIRE(cells_by_id(rebuilt.validation) == cells_by_id(split.validation));
    REQUIRE(cells_by_id(rebuilt.test) == cells_by_id(split.test));
}

TEST_CASE("active filter keeps entities active near both ends") {
    TimeGrid grid{0, 1, 8};
    std::vector<RatingEvent> events;
    // "active" user: 6 events spanning both edge quartiles
    for (int t : {0, 1, 3, 4, 6, 7})
        events.push_back({"active", "i" + std::to_string(t % 3), t, 1.0});
    // busy user missing the late quartile
    for (int t : {0, 0, 1, 2, 3, 3})
        events.push_back({"early-only", "i" + std::to_string(t % 3), t, 1.0});
    // sparse user present at both ends but under the event minimum
    events.push_back({"sparse", "i0", 0, 1.0});
    events.push_back({"sparse", "i1", 7, 1.0});
    // keep the items themselves active
    for (int t = 0; t < 8; ++t)
        for (int i = 0; i < 3; ++i)
            events.push_back({"filler" + std::to_string(t * 3 + i),
                              "i" + std::to_string(i), t, 1.0});

    InteractionTensor tensor = discretize(events, grid, DedupPolicy::sum);
    InteractionTensor filtered = filter_active(tensor, ActiveFilter{5, 0.25});
    REQUIRE(filtered.users.get("active").has_value());
    REQUIRE_FALSE(filtered.users.get("early-only").has_value());
    REQUIRE_FALSE(filtered.users.get("sparse").has_value());
}
