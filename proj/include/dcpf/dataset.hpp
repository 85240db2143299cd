#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dcpf/common.hpp"

namespace dcpf {

/// One time-stamped rating event as read from an input file.
struct RatingEvent {
    std::string user_id;
    std::string item_id;
    std::int64_t timestamp = 0;
    double value = 1.0;
};

/// Contiguous equal-width time windows covering the data horizon.
struct TimeGrid {
    std::int64_t origin = 0;
    std::int64_t window_length = 1;
    std::size_t num_windows = 1;

    /// Equal-width grid spanning [min_ts, max_ts] with exactly T windows.
    static TimeGrid with_num_windows(std::int64_t min_ts, std::int64_t max_ts,
                                     std::size_t T) {
        if (T == 0) throw range_error("TimeGrid: num_windows must be positive");
        if (max_ts < min_ts) throw range_error("TimeGrid: empty horizon");
        std::int64_t span = max_ts - min_ts + 1;
        std::int64_t len = (span + std::int64_t(T) - 1) / std::int64_t(T);
        return TimeGrid{min_ts, len, T};
    }

    /// Grid spanning [min_ts, max_ts] with windows of the given length.
    static TimeGrid with_window_length(std::int64_t min_ts, std::int64_t max_ts,
                                       std::int64_t len) {
        if (len <= 0) throw range_error("TimeGrid: window_length must be positive");
        if (max_ts < min_ts) throw range_error("TimeGrid: empty horizon");
        std::int64_t span = max_ts - min_ts + 1;
        std::size_t T = std::size_t((span + len - 1) / len);
        return TimeGrid{min_ts, len, T};
    }

    bool contains(std::int64_t ts) const {
        return ts >= origin && ts < origin + window_length * std::int64_t(num_windows);
    }

    std::size_t window_index(std::int64_t ts) const {
        if (!contains(ts))
            throw range_error("TimeGrid: timestamp " + std::to_string(ts) +
                              " outside the grid horizon");
        return std::size_t((ts - origin) / window_length);
    }

    std::int64_t window_start(std::size_t t) const {
        return origin + window_length * std::int64_t(t);
    }
};

/// Insertion-ordered map between opaque string ids and dense indices.
class IdMap {
public:
    std::size_t add(const std::string& id) {
        auto it = index_.find(id);
        if (it != index_.end()) return it->second;
        std::size_t i = ids_.size();
        index_.emplace(id, i);
        ids_.push_back(id);
        return i;
    }

    std::optional<std::size_t> get(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    const std::string& lookup(std::size_t index) const { return ids_.at(index); }
    std::size_t size() const { return ids_.size(); }
    const std::vector<std::string>& ids() const { return ids_; }

private:
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::string> ids_;
};

/// One stored nonzero of the (user, item, window) tensor.
struct Cell {
    std::uint32_t user = 0;
    std::uint32_t item = 0;
    std::uint32_t window = 0;
    double value = 0.0;
};

inline bool cell_order(const Cell& a, const Cell& b) {
    if (a.window != b.window) return a.window < b.window;
    if (a.user != b.user) return a.user < b.user;
    return a.item < b.item;
}

/// Sparse (user, item, window) -> rating store. Cells are kept in
/// canonical (window, user, item) order; zeros are implicit.
class InteractionTensor {
public:
    IdMap users;
    IdMap items;
    TimeGrid grid;

    InteractionTensor() = default;

    std::size_t num_users() const { return users.size(); }
    std::size_t num_items() const { return items.size(); }
    std::size_t num_windows() const { return grid.num_windows; }
    std::size_t nnz() const { return cells_.size(); }
    const std::vector<Cell>& cells() const { return cells_; }

    std::size_t nnz_in_window(std::size_t t) const {
        check_window(t);
        return window_offsets_[t + 1] - window_offsets_[t];
    }

    /// 1 - nnz(t) / (M*N); 1 for an empty entity set.
    double sparsity(std::size_t t) const {
        double total = double(num_users()) * double(num_items());
        if (total == 0) return 1.0;
        return 1.0 - double(nnz_in_window(t)) / total;
    }

    std::span<const Cell> window_cells(std::size_t t) const {
        check_window(t);
        return std::span<const Cell>(cells_).subspan(
            window_offsets_[t], window_offsets_[t + 1] - window_offsets_[t]);
    }

    const std::vector<std::uint32_t>& user_cells(std::size_t m) const {
        return user_cells_.at(m);
    }
    const std::vector<std::uint32_t>& item_cells(std::size_t n) const {
        return item_cells_.at(n);
    }

    std::optional<double> value_at(std::size_t m, std::size_t n, std::size_t t) const {
        auto it = lookup_.find(pack(m, n, t));
        if (it == lookup_.end()) return std::nullopt;
        return cells_[it->second].value;
    }

    /// Sorts cells canonically and rebuilds the per-window and per-entity
    /// indexes. Duplicate (user, item, window) triples are rejected.
    void finalize(std::vector<Cell> cells) {
        std::sort(cells.begin(), cells.end(), cell_order);
        for (std::size_t i = 1; i < cells.size(); ++i) {
            const Cell& a = cells[i - 1];
            const Cell& b = cells[i];
            if (a.user == b.user && a.item == b.item && a.window == b.window)
                throw error("InteractionTensor: duplicate cell after deduplication");
        }
        cells_ = std::move(cells);
        window_offsets_.assign(grid.num_windows + 1, 0);
        for (const Cell& c : cells_) {
            if (c.window >= grid.num_windows)
                throw range_error("InteractionTensor: cell window out of range");
            window_offsets_[c.window + 1]++;
        }
        for (std::size_t t = 0; t < grid.num_windows; ++t)
            window_offsets_[t + 1] += window_offsets_[t];
        user_cells_.assign(users.size(), {});
        item_cells_.assign(items.size(), {});
        lookup_.clear();
        lookup_.reserve(cells_.size() * 2);
        for (std::size_t i = 0; i < cells_.size(); ++i) {
            const Cell& c = cells_[i];
            user_cells_.at(c.user).push_back(std::uint32_t(i));
            item_cells_.at(c.item).push_back(std::uint32_t(i));
            lookup_.emplace(pack(c.user, c.item, c.window), i);
        }
    }

private:
    static std::uint64_t pack(std::size_t m, std::size_t n, std::size_t t) {
        return (std::uint64_t(m) << 40) | (std::uint64_t(n) << 16) | std::uint64_t(t);
    }

    void check_window(std::size_t t) const {
        if (t >= grid.num_windows) throw range_error("window index out of range");
    }

    std::vector<Cell> cells_;
    std::vector<std::size_t> window_offsets_;
    std::vector<std::vector<std::uint32_t>> user_cells_;
    std::vector<std::vector<std::uint32_t>> item_cells_;
    std::unordered_map<std::uint64_t, std::size_t> lookup_;
};

/// Train/validation/test partition by trailing windows. All three
/// tensors share the id maps of the source tensor; train carries a
/// truncated grid, validation and test keep the full grid.
struct DataSplit {
    InteractionTensor train;
    InteractionTensor validation;
    InteractionTensor test;
    std::size_t held_out_windows = 0;
};

// ---------------------------------------------------------------------------
// Parsing

/// Zero-based column positions in delimiter-separated input; value < 0
/// means the column is absent and every event gets value 1.
struct ColumnSchema {
    int user = 0;
    int item = 1;
    int timestamp = 2;
    int value = 3;
};

struct ParseOptions {
    char delimiter = ',';
    bool has_header = false;
    ColumnSchema schema;
    /// Abort when more than this fraction of data lines is malformed.
    double malformed_threshold = 0.01;
};

struct MalformedLine {
    std::size_t line_number;
    std::string message;
};

struct ParseResult {
    std::vector<RatingEvent> events;
    std::vector<MalformedLine> malformed;
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, char delim) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find(delim, start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

inline bool parse_int64(std::string_view s, std::int64_t& out) {
    if (s.empty()) return false;
    std::int64_t v = 0;
    bool neg = false;
    std::size_t i = 0;
    if (s[0] == '-') { neg = true; i = 1; }
    if (i == s.size()) return false;
    for (; i < s.size(); ++i) {
        if (s[i] < '0' || s[i] > '9') return false;
        v = v * 10 + (s[i] - '0');
    }
    out = neg ? -v : v;
    return true;
}

inline bool parse_real(std::string_view s, double& out) {
    if (s.empty()) return false;
    std::string buf(s);
    char* end = nullptr;
    out = std::strtod(buf.c_str(), &end);
    return end == buf.c_str() + buf.size() && std::isfinite(out);
}

}  // namespace detail

/// Parses delimiter-separated rating events. Malformed lines are
/// collected with their line numbers; parsing aborts when they exceed
/// the configured fraction of data lines.
inline ParseResult parse_events(std::istream& in, const ParseOptions& opts = {}) {
    const ColumnSchema& sch = opts.schema;
    if (sch.user < 0 || sch.item < 0 || sch.timestamp < 0)
        throw schema_error("parse_events: user, item and timestamp columns are required");
    int max_required = std::max(sch.user, std::max(sch.item, sch.timestamp));

    ParseResult result;
    std::string line;
    std::size_t line_number = 0;
    std::size_t data_lines = 0;
    bool skip_header = opts.has_header;
    while (std::getline(in, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (skip_header) { skip_header = false; continue; }
        if (line.empty()) continue;
        ++data_lines;
        auto fields = detail::split_fields(line, opts.delimiter);
        auto fail = [&](const std::string& msg) {
            result.malformed.push_back({line_number, msg});
        };
        if (int(fields.size()) <= max_required) {
            fail("expected at least " + std::to_string(max_required + 1) + " columns");
            continue;
        }
        RatingEvent ev;
        ev.user_id = std::string(fields[sch.user]);
        ev.item_id = std::string(fields[sch.item]);
        if (ev.user_id.empty() || ev.item_id.empty()) {
            fail("empty user or item id");
            continue;
        }
        if (!detail::parse_int64(fields[sch.timestamp], ev.timestamp)) {
            fail("unparseable timestamp '" + std::string(fields[sch.timestamp]) + "'");
            continue;
        }
        if (sch.value >= 0 && int(fields.size()) > sch.value) {
            if (!detail::parse_real(fields[sch.value], ev.value)) {
                fail("unparseable value '" + std::string(fields[sch.value]) + "'");
                continue;
            }
        } else {
            ev.value = 1.0;  // implicit/binary data
        }
        result.events.push_back(std::move(ev));
    }
    if (data_lines > 0 &&
        double(result.malformed.size()) > opts.malformed_threshold * double(data_lines)) {
        throw parse_error("parse_events: " + std::to_string(result.malformed.size()) +
                          " of " + std::to_string(data_lines) +
                          " lines malformed (first at line " +
                          std::to_string(result.malformed.front().line_number) + ": " +
                          result.malformed.front().message + ")");
    }
    return result;
}

// ---------------------------------------------------------------------------
// Discretization and deduplication

enum class DedupPolicy { keep_first, keep_last, sum };
enum class CrossWindowPolicy { none, keep_first, keep_last };

/// Buckets events into the grid's windows, resolving within-window
/// duplicates by the given policy. Dense indices are assigned in
/// first-seen order; zero-valued results are dropped.
inline InteractionTensor discretize(const std::vector<RatingEvent>& events,
                                    const TimeGrid& grid, DedupPolicy policy) {
    InteractionTensor tensor;
    tensor.grid = grid;

    struct Slot {
        double value = 0.0;
        std::int64_t ts = 0;
        std::size_t pos = 0;
    };
    std::unordered_map<std::uint64_t, Slot> slots;
    slots.reserve(events.size() * 2);

    auto pack = [](std::size_t m, std::size_t n, std::size_t t) {
        return (std::uint64_t(m) << 40) | (std::uint64_t(n) << 16) | std::uint64_t(t);
    };

    for (std::size_t pos = 0; pos < events.size(); ++pos) {
        const RatingEvent& ev = events[pos];
        if (!grid.contains(ev.timestamp))
            throw range_error("discretize: event (" + ev.user_id + ", " + ev.item_id +
                              ", t=" + std::to_string(ev.timestamp) +
                              ") outside the grid horizon");
        std::size_t m = tensor.users.add(ev.user_id);
        std::size_t n = tensor.items.add(ev.item_id);
        if (m >= (1u << 24) || n >= (1u << 24) || grid.num_windows > (1u << 16))
            throw range_error("discretize: dimensions exceed index capacity");
        std::size_t t = grid.window_index(ev.timestamp);
        auto [it, inserted] = slots.try_emplace(pack(m, n, t));
        Slot& s = it->second;
        bool take = inserted;
        switch (policy) {
            case DedupPolicy::sum:
                s.value += ev.value;
                continue;
            case DedupPolicy::keep_first:
                take = take || ev.timestamp < s.ts;
                break;
            case DedupPolicy::keep_last:
                take = take || ev.timestamp > s.ts ||
                       (ev.timestamp == s.ts && pos > s.pos);
                break;
        }
        if (take) {
            s.value = ev.value;
            s.ts = ev.timestamp;
            s.pos = pos;
        }
    }

    std::vector<Cell> cells;
    cells.reserve(slots.size());
    for (const auto& [key, slot] : slots) {
        if (slot.value == 0.0) continue;  // zeros are implicit
        Cell c;
        c.user = std::uint32_t(key >> 40);
        c.item = std::uint32_t((key >> 16) & 0xffffff);
        c.window = std::uint32_t(key & 0xffff);
        c.value = slot.value;
        cells.push_back(c);
    }
    tensor.finalize(std::move(cells));
    return tensor;
}

/// Keeps one cell per (user, item) pair across windows: the earliest
/// window with keep_first, the latest with keep_last. Prepares the input
/// of a static single-window ablation.
inline InteractionTensor dedup_across_windows(const InteractionTensor& tensor,
                                              CrossWindowPolicy policy) {
    if (policy == CrossWindowPolicy::none) return tensor;
    std::unordered_map<std::uint64_t, Cell> best;
    best.reserve(tensor.nnz() * 2);
    for (const Cell& c : tensor.cells()) {
        std::uint64_t key = (std::uint64_t(c.user) << 24) | c.item;
        auto [it, inserted] = best.try_emplace(key, c);
        if (inserted) continue;
        bool take = policy == CrossWindowPolicy::keep_first ? c.window < it->second.window
                                                            : c.window > it->second.window;
        if (take) it->second = c;
    }
    std::vector<Cell> cells;
    cells.reserve(best.size());
    for (const auto& [key, c] : best) cells.push_back(c);
    InteractionTensor out;
    out.users = tensor.users;
    out.items = tensor.items;
    out.grid = tensor.grid;
    out.finalize(std::move(cells));
    return out;
}

/// Collapses every cell to a single window (T = 1). The input must hold
/// at most one cell per (user, item) pair; run dedup_across_windows first.
inline InteractionTensor collapse_to_static(const InteractionTensor& tensor) {
    std::vector<Cell> cells;
    cells.reserve(tensor.nnz());
    for (Cell c : tensor.cells()) {
        c.window = 0;
        cells.push_back(c);
    }
    InteractionTensor out;
    out.users = tensor.users;
    out.items = tensor.items;
    out.grid = TimeGrid{tensor.grid.origin,
                        tensor.grid.window_length * std::int64_t(tensor.grid.num_windows),
                        1};
    out.finalize(std::move(cells));  // throws on duplicate pairs
    return out;
}

/// Splits by trailing windows: train takes [0, T-H), the held-out cells
/// are divided into a seeded uniform validation fraction and the test
/// remainder.
inline DataSplit split_by_time(const InteractionTensor& tensor,
                               std::size_t held_out_windows,
                               double validation_fraction, std::uint64_t seed) {
    std::size_t T = tensor.num_windows();
    if (held_out_windows < 1 || held_out_windows >= T)
        throw split_error("split_by_time: held_out_windows must satisfy 1 <= H < T");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0)
        throw split_error("split_by_time: validation_fraction must lie in [0, 1)");
    std::size_t train_T = T - held_out_windows;

    std::vector<Cell> train_cells;
    std::vector<Cell> held_out;
    for (const Cell& c : tensor.cells()) {
        if (c.window < train_T)
            train_cells.push_back(c);
        else
            held_out.push_back(c);
    }
    if (held_out.empty())
        throw split_error("split_by_time: no cells in the held-out windows");

    std::vector<std::size_t> order(held_out.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = make_rng(seed, 0x5917);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t n_val =
        std::size_t(std::floor(validation_fraction * double(held_out.size()) + 0.5));

    std::vector<Cell> val_cells;
    std::vector<Cell> test_cells;
    val_cells.reserve(n_val);
    test_cells.reserve(held_out.size() - n_val);
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (i < n_val)
            val_cells.push_back(held_out[order[i]]);
        else
            test_cells.push_back(held_out[order[i]]);
    }

    DataSplit split;
    split.held_out_windows = held_out_windows;
    split.train.users = tensor.users;
    split.train.items = tensor.items;
    split.train.grid = TimeGrid{tensor.grid.origin, tensor.grid.window_length, train_T};
    split.train.finalize(std::move(train_cells));
    split.validation.users = tensor.users;
    split.validation.items = tensor.items;
    split.validation.grid = tensor.grid;
    split.validation.finalize(std::move(val_cells));
    split.test.users = tensor.users;
    split.test.items = tensor.items;
    split.test.grid = tensor.grid;
    split.test.finalize(std::move(test_cells));
    return split;
}

// ---------------------------------------------------------------------------
// Active-entity filtering

struct ActiveFilter {
    std::size_t min_events = 5;
    /// Entities must appear in the first and last `presence_fraction`
    /// of windows (rounded up to at least one window).
    double presence_fraction = 0.25;
};

/// Keeps users and items with enough activity and presence near both
/// ends of the horizon; indices are reassigned preserving order.
inline InteractionTensor filter_active(const InteractionTensor& tensor,
                                       const ActiveFilter& filter = {}) {
    std::size_t T = tensor.num_windows();
    std::size_t edge = std::max<std::size_t>(
        1, std::size_t(std::ceil(filter.presence_fraction * double(T))));

    struct Stats {
        std::size_t events = 0;
        bool early = false;
        bool late = false;
    };
    std::vector<Stats> user_stats(tensor.num_users());
    std::vector<Stats> item_stats(tensor.num_items());
    for (const Cell& c : tensor.cells()) {
        for (Stats* s : {&user_stats[c.user], &item_stats[c.item]}) {
            s->events++;
            if (c.window < edge) s->early = true;
            if (c.window + edge >= T) s->late = true;
        }
    }
    auto keep = [&](const Stats& s) {
        return s.events >= filter.min_events && s.early && s.late;
    };

    InteractionTensor out;
    out.grid = tensor.grid;
    std::vector<std::int64_t> user_remap(tensor.num_users(), -1);
    std::vector<std::int64_t> item_remap(tensor.num_items(), -1);
    for (std::size_t m = 0; m < tensor.num_users(); ++m)
        if (keep(user_stats[m]))
            user_remap[m] = std::int64_t(out.users.add(tensor.users.lookup(m)));
    for (std::size_t n = 0; n < tensor.num_items(); ++n)
        if (keep(item_stats[n]))
            item_remap[n] = std::int64_t(out.items.add(tensor.items.lookup(n)));

    std::vector<Cell> cells;
    for (const Cell& c : tensor.cells()) {
        if (user_remap[c.user] < 0 || item_remap[c.item] < 0) continue;
        Cell kept = c;
        kept.user = std::uint32_t(user_remap[c.user]);
        kept.item = std::uint32_t(item_remap[c.item]);
        cells.push_back(kept);
    }
    out.finalize(std::move(cells));
    return out;
}

// ---------------------------------------------------------------------------
// Canonical file formats

/// Writes the canonical tensor file: a `DCPF-TENSOR v1` header line,
/// an `M N T` line, then one `m n t y` line per cell.
inline void write_tensor(const InteractionTensor& tensor, std::ostream& out) {
    out << "DCPF-TENSOR v1\n";
    out << tensor.num_users() << ' ' << tensor.num_items() << ' '
        << tensor.num_windows() << '\n';
    for (const Cell& c : tensor.cells())
        out << c.user << ' ' << c.item << ' ' << c.window << ' '
            << format_double(c.value) << '\n';
}

/// Writes one id-map sidecar (`index<TAB>original_id` rows).
inline void write_id_map(const IdMap& map, std::ostream& out) {
    for (std::size_t i = 0; i < map.size(); ++i)
        out << i << '\t' << map.lookup(i) << '\n';
}

inline IdMap read_id_map(std::istream& in) {
    IdMap map;
    std::string line;
    std::size_t expect = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw io_error("id map: missing tab separator");
        std::int64_t idx = 0;
        if (!detail::parse_int64(std::string_view(line).substr(0, tab), idx) ||
            std::size_t(idx) != expect)
            throw io_error("id map: indices must be dense and ordered");
        map.add(line.substr(tab + 1));
        ++expect;
    }
    return map;
}

/// Reads a canonical tensor file. The grid of a loaded tensor is the
/// index grid (origin 0, unit windows): window indices are the only
/// time information the format carries.
inline InteractionTensor read_tensor(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "DCPF-TENSOR v1")
        throw io_error("tensor file: bad or missing DCPF-TENSOR v1 header");
    if (!std::getline(in, line)) throw io_error("tensor file: missing dimension line");
    std::istringstream dims(line);
    std::size_t M = 0, N = 0, T = 0;
    if (!(dims >> M >> N >> T) || T == 0)
        throw io_error("tensor file: bad dimension line");
    InteractionTensor tensor;
    tensor.grid = TimeGrid{0, 1, T};
    for (std::size_t i = 0; i < M; ++i) tensor.users.add("u" + std::to_string(i));
    for (std::size_t i = 0; i < N; ++i) tensor.items.add("i" + std::to_string(i));
    std::vector<Cell> cells;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        Cell c;
        if (!(row >> c.user >> c.item >> c.window >> c.value))
            throw io_error("tensor file: bad cell line '" + line + "'");
        if (c.user >= M || c.item >= N || c.window >= T)
            throw io_error("tensor file: cell index out of range");
        cells.push_back(c);
    }
    tensor.finalize(std::move(cells));
    return tensor;
}

/// Replaces the placeholder ids of a loaded tensor with sidecar maps.
inline void attach_id_maps(InteractionTensor& tensor, IdMap users, IdMap items) {
    if (users.size() != tensor.num_users() || items.size() != tensor.num_items())
        throw io_error("id maps do not match tensor dimensions");
    tensor.users = std::move(users);
    tensor.items = std::move(items);
}

/// Emits cells back as rating-event lines (window start as timestamp).
/// Discretizing the result on the same grid with the sum policy
/// reproduces the tensor.
inline void write_tensor_as_events(const InteractionTensor& tensor, std::ostream& out,
                                   char delimiter = ',') {
    for (const Cell& c : tensor.cells()) {
        out << tensor.users.lookup(c.user) << delimiter << tensor.items.lookup(c.item)
            << delimiter << tensor.grid.window_start(c.window) << delimiter
            << format_double(c.value) << '\n';
    }
}

/// Split manifest: names the tensor file plus the held-out membership.
/// Train cells are implicit (every tensor cell with t < T - H).
inline void write_split_manifest(const DataSplit& split, const std::string& tensor_file,
                                 std::ostream& out) {
    out << "DCPF-SPLIT v1\n";
    out << "tensor " << tensor_file << '\n';
    out << "holdout " << split.held_out_windows << '\n';
    out << "validation " << split.validation.nnz() << '\n';
    for (const Cell& c : split.validation.cells())
        out << c.user << ' ' << c.item << ' ' << c.window << '\n';
    out << "test " << split.test.nnz() << '\n';
    for (const Cell& c : split.test.cells())
        out << c.user << ' ' << c.item << ' ' << c.window << '\n';
}

struct SplitManifest {
    std::string tensor_file;
    std::size_t held_out_windows = 0;
    std::vector<Cell> validation;  // values filled from the tensor
    std::vector<Cell> test;
};

inline SplitManifest read_split_manifest(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "DCPF-SPLIT v1")
        throw io_error("split manifest: bad or missing DCPF-SPLIT v1 header");
    SplitManifest manifest;
    std::string key;
    if (!(in >> key >> manifest.tensor_file) || key != "tensor")
        throw io_error("split manifest: missing tensor line");
    if (!(in >> key >> manifest.held_out_windows) || key != "holdout")
        throw io_error("split manifest: missing holdout line");
    auto read_section = [&](const std::string& name, std::vector<Cell>& cells) {
        std::size_t count = 0;
        if (!(in >> key >> count) || key != name)
            throw io_error("split manifest: missing " + name + " section");
        cells.resize(count);
        for (std::size_t i = 0; i < count; ++i)
            if (!(in >> cells[i].user >> cells[i].item >> cells[i].window))
                throw io_error("split manifest: truncated " + name + " section");
    };
    read_section("validation", manifest.validation);
    read_section("test", manifest.test);
    return manifest;
}

/// Rebuilds a DataSplit from a manifest against its full tensor.
inline DataSplit apply_split_manifest(const InteractionTensor& tensor,
                                      const SplitManifest& manifest) {
    std::size_t T = tensor.num_windows();
    if (manifest.held_out_windows < 1 || manifest.held_out_windows >= T)
        throw split_error("split manifest: holdout incompatible with tensor");
    std::size_t train_T = T - manifest.held_out_windows;

    DataSplit split;
    split.held_out_windows = manifest.held_out_windows;
    auto fill = [&](const std::vector<Cell>& listed) {
        std::vector<Cell> cells;
        cells.reserve(listed.size());
        for (Cell c : listed) {
            auto y = tensor.value_at(c.user, c.item, c.window);
            if (!y || c.window < train_T)
                throw split_error("split manifest: listed cell not in held-out tensor");
            c.value = *y;
            cells.push_back(c);
        }
        return cells;
    };
    std::vector<Cell> train_cells;
    for (const Cell& c : tensor.cells())
        if (c.window < train_T) train_cells.push_back(c);

    split.train.users = tensor.users;
    split.train.items = tensor.items;
    split.train.grid = TimeGrid{tensor.grid.origin, tensor.grid.window_length, train_T};
    split.train.finalize(std::move(train_cells));
    split.validation.users = tensor.users;
    split.validation.items = tensor.items;
    split.validation.grid = tensor.grid;
    split.validation.finalize(fill(manifest.validation));
    split.test.users = tensor.users;
    split.test.items = tensor.items;
    split.test.grid = tensor.grid;
    split.test.finalize(fill(manifest.test));
    return split;
}

}  // namespace dcpf
