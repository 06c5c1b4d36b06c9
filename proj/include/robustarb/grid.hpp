#pragma once

// Log-uniform tensor grids on a box inside the positive orthant and functions
// U(t, x) stored as time slices on them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "robustarb/csv.hpp"
#include "robustarb/errors.hpp"
#include "robustarb/model.hpp"

namespace robustarb {

struct AxisSpec {
    double lo = 0.1;
    double hi = 10.0;
    std::size_t nodes = 33;
};

class SpatialGrid {
public:
    SpatialGrid() = default;

    explicit SpatialGrid(std::vector<AxisSpec> axes) : axes_(std::move(axes)) {
        if (axes_.empty()) throw ConfigError("grid: need at least one axis");
        size_ = 1;
        for (const auto& a : axes_) {
            if (!(a.lo > 0.0) || !std::isfinite(a.hi) || !(a.hi > a.lo))
                throw ConfigError("grid: axis needs 0 < lo < hi");
            if (a.nodes < 3) throw ConfigError("grid: need at least 3 nodes per axis");
            log_lo_.push_back(std::log(a.lo));
            log_hi_.push_back(std::log(a.hi));
            spacing_.push_back((log_hi_.back() - log_lo_.back()) / static_cast<double>(a.nodes - 1));
            size_ *= a.nodes;
        }
    }

    static SpatialGrid cube(std::size_t n, double lo, double hi, std::size_t nodes) {
        return SpatialGrid(std::vector<AxisSpec>(n, AxisSpec{lo, hi, nodes}));
    }

    std::size_t dimension() const { return axes_.size(); }
    std::size_t size() const { return size_; }
    const std::vector<AxisSpec>& axes() const { return axes_; }
    std::size_t nodes(std::size_t axis) const { return axes_[axis].nodes; }
    // Spacing in log-coordinates.
    double spacing(std::size_t axis) const { return spacing_[axis]; }
    double log_lo(std::size_t axis) const { return log_lo_[axis]; }
    double log_hi(std::size_t axis) const { return log_hi_[axis]; }

    double log_node(std::size_t axis, std::size_t j) const {
        if (j + 1 == axes_[axis].nodes) return log_hi_[axis];
        return log_lo_[axis] + static_cast<double>(j) * spacing_[axis];
    }
    double node(std::size_t axis, std::size_t j) const { return std::exp(log_node(axis, j)); }

    // Flat index with axis 0 varying slowest.
    std::size_t flat(std::span<const std::size_t> idx) const {
        std::size_t f = 0;
        for (std::size_t a = 0; a < axes_.size(); ++a) f = f * axes_[a].nodes + idx[a];
        return f;
    }
    std::vector<std::size_t> multi(std::size_t f) const {
        std::vector<std::size_t> idx(axes_.size());
        for (std::size_t a = axes_.size(); a-- > 0;) {
            idx[a] = f % axes_[a].nodes;
            f /= axes_[a].nodes;
        }
        return idx;
    }
    // Stride of axis `a` in flat indexing.
    std::size_t stride(std::size_t a) const {
        std::size_t s = 1;
        for (std::size_t b = a + 1; b < axes_.size(); ++b) s *= axes_[b].nodes;
        return s;
    }

    Point point(std::size_t f) const {
        const auto idx = multi(f);
        Point p(axes_.size());
        for (std::size_t a = 0; a < axes_.size(); ++a) p[a] = node(a, idx[a]);
        return p;
    }

    bool is_boundary(std::size_t f) const {
        const auto idx = multi(f);
        for (std::size_t a = 0; a < axes_.size(); ++a)
            if (idx[a] == 0 || idx[a] + 1 == axes_[a].nodes) return true;
        return false;
    }

    std::vector<std::size_t> boundary_nodes() const {
        std::vector<std::size_t> out;
        for (std::size_t f = 0; f < size_; ++f)
            if (is_boundary(f)) out.push_back(f);
        return out;
    }

    bool contains_log(std::span<const double> xi) const {
        for (std::size_t a = 0; a < axes_.size(); ++a)
            if (xi[a] < log_lo_[a] - 1e-12 || xi[a] > log_hi_[a] + 1e-12) return false;
        return true;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& a : axes_) j.push_back({{"lo", a.lo}, {"hi", a.hi}, {"nodes", a.nodes}});
        return j;
    }

    static SpatialGrid from_json(const nlohmann::json& j) {
        std::vector<AxisSpec> axes;
        for (const auto& a : j) axes.push_back({a.at("lo").get<double>(), a.at("hi").get<double>(), a.at("nodes").get<std::size_t>()});
        return SpatialGrid(std::move(axes));
    }

    bool operator==(const SpatialGrid& o) const {
        if (axes_.size() != o.axes_.size()) return false;
        for (std::size_t a = 0; a < axes_.size(); ++a)
            if (axes_[a].lo != o.axes_[a].lo || axes_[a].hi != o.axes_[a].hi || axes_[a].nodes != o.axes_[a].nodes)
                return false;
        return true;
    }

private:
    std::vector<AxisSpec> axes_;
    std::vector<double> log_lo_, log_hi_, spacing_;
    std::size_t size_ = 0;
};

// How a GridFunction answers queries outside its box.
enum class Extension {
    clamp,    // project onto the box in log-coordinates
    rescale,  // degree-0 homogeneous functions: move the query along the ray c*y into the box
    // Degree-0 extension from the central section: every query, inside the
    // box or not, moves along its ray to where the mean log-coordinate equals
    // the box centre's (or the nearest point of the ray inside the box). The
    // result is exactly scale-invariant and stays away from the boundary data.
    section,
};

inline const char* to_string(Extension e) {
    switch (e) {
        case Extension::clamp: return "clamp";
        case Extension::rescale: return "rescale";
        case Extension::section: return "section";
    }
    return "clamp";
}
inline Extension extension_from_string(const std::string& s) {
    if (s == "clamp") return Extension::clamp;
    if (s == "rescale") return Extension::rescale;
    if (s == "section") return Extension::section;
    throw ConfigError("grid function: unknown extension '" + s + "'");
}

// U(t, x) on a SpatialGrid at increasing times; multilinear in log x, linear
// in t. Optional per-node standard errors travel with the values.
class GridFunction {
public:
    GridFunction() = default;
    GridFunction(SpatialGrid grid, std::vector<double> times, std::vector<std::vector<double>> slices,
                 Extension ext = Extension::clamp)
        : grid_(std::move(grid)), times_(std::move(times)), slices_(std::move(slices)), ext_(ext) {
        validate();
    }

    const SpatialGrid& grid() const { return grid_; }
    const std::vector<double>& times() const { return times_; }
    const std::vector<std::vector<double>>& slices() const { return slices_; }
    const std::vector<double>& slice(std::size_t j) const { return slices_[j]; }
    std::size_t slice_count() const { return slices_.size(); }
    Extension extension() const { return ext_; }
    void set_extension(Extension e) { ext_ = e; }
    double horizon() const { return times_.back(); }

    bool has_errors() const { return !errors_.empty(); }
    const std::vector<std::vector<double>>& errors() const { return errors_; }
    void set_errors(std::vector<std::vector<double>> errors) {
        if (errors.size() != slices_.size()) throw UsageError("grid function: error slices do not match values");
        for (const auto& e : errors)
            if (e.size() != grid_.size()) throw UsageError("grid function: error slice has wrong size");
        errors_ = std::move(errors);
    }

    // Free-form provenance carried into the sidecar metadata.
    std::map<std::string, std::string>& metadata() { return meta_; }
    const std::map<std::string, std::string>& metadata() const { return meta_; }

    // Maps a query to log-coordinates inside the box; nullopt when the query
    // is outside and the extension cannot bring it in.
    std::optional<Point> locate(std::span<const double> y) const {
        const std::size_t n = grid_.dimension();
        if (y.size() != n) throw UsageError("grid function: query has wrong dimension");
        Point xi(n);
        for (std::size_t a = 0; a < n; ++a) xi[a] = std::log(y[a]);
        if (ext_ != Extension::section && grid_.contains_log(xi)) return xi;
        if (ext_ == Extension::clamp) return std::nullopt;
        double s_lo = -std::numeric_limits<double>::infinity();
        double s_hi = std::numeric_limits<double>::infinity();
        double target = 0.0;
        for (std::size_t a = 0; a < n; ++a) {
            s_lo = std::max(s_lo, grid_.log_lo(a) - xi[a]);
            s_hi = std::min(s_hi, grid_.log_hi(a) - xi[a]);
            target += 0.5 * (grid_.log_lo(a) + grid_.log_hi(a)) - xi[a];
        }
        if (s_lo > s_hi) return std::nullopt;
        const double s = std::clamp(ext_ == Extension::section ? target / static_cast<double>(n) : 0.0, s_lo, s_hi);
        for (double& v : xi) v += s;
        return xi;
    }

    bool covers(std::span<const double> y) const { return locate(y).has_value(); }

    double value(double t, std::span<const double> y) const { return interpolate(slices_, t, y); }

    double error(double t, std::span<const double> y) const {
        if (errors_.empty()) return 0.0;
        return interpolate(errors_, t, y);
    }

    // Multilinear interpolation of arbitrary slice data sharing this layout.
    double interpolate(const std::vector<std::vector<double>>& data, double t, std::span<const double> y) const {
        Point xi;
        if (auto loc = locate(y)) {
            xi = std::move(*loc);
        } else {
            xi.resize(grid_.dimension());
            for (std::size_t a = 0; a < xi.size(); ++a)
                xi[a] = std::clamp(std::log(y[a]), grid_.log_lo(a), grid_.log_hi(a));
        }
        const auto [j, w] = time_bracket(t);
        const double lo = spatial(data[j], xi);
        if (w == 0.0) return lo;
        return (1.0 - w) * lo + w * spatial(data[j + 1], xi);
    }

    double spatial(const std::vector<double>& slice, std::span<const double> xi) const {
        const std::size_t n = grid_.dimension();
        std::vector<std::size_t> base(n);
        std::vector<double> frac(n);
        for (std::size_t a = 0; a < n; ++a) {
            const double pos = (std::clamp(xi[a], grid_.log_lo(a), grid_.log_hi(a)) - grid_.log_lo(a)) / grid_.spacing(a);
            std::size_t j = static_cast<std::size_t>(std::floor(pos));
            j = std::min(j, grid_.nodes(a) - 2);
            base[a] = j;
            frac[a] = std::clamp(pos - static_cast<double>(j), 0.0, 1.0);
        }
        double acc = 0.0;
        std::vector<std::size_t> idx(n);
        for (std::size_t corner = 0; corner < (std::size_t{1} << n); ++corner) {
            double weight = 1.0;
            for (std::size_t a = 0; a < n; ++a) {
                const bool up = (corner >> a) & 1u;
                idx[a] = base[a] + (up ? 1 : 0);
                weight *= up ? frac[a] : 1.0 - frac[a];
            }
            if (weight != 0.0) acc += weight * slice[grid_.flat(idx)];
        }
        return acc;
    }

    // Slice index j and weight w with t = (1-w) t_j + w t_{j+1}.
    std::pair<std::size_t, double> time_bracket(double t) const {
        const double tol = 1e-12 * std::max(1.0, times_.back());
        if (t < times_.front() - tol || t > times_.back() + tol)
            throw UsageError("grid function: time " + csv::format(t) + " outside [" + csv::format(times_.front()) +
                             ", " + csv::format(times_.back()) + "]");
        if (times_.size() == 1 || t <= times_.front()) return {0, 0.0};
        if (t >= times_.back()) return {times_.size() - 2, 1.0};
        const auto it = std::upper_bound(times_.begin(), times_.end(), t);
        const std::size_t j = static_cast<std::size_t>(it - times_.begin()) - 1;
        return {j, (t - times_[j]) / (times_[j + 1] - times_[j])};
    }

    // CSV rows (t, x_1..x_n, u[, se]), slice-major, plus a JSON sidecar with
    // the grid, the time axis and provenance.
    void write(const std::string& csv_path, const std::string& meta_path) const {
        {
            std::ofstream out(csv_path, std::ios::binary);
            if (!out) throw UsageError("grid function: cannot write " + csv_path);
            write_csv(out);
        }
        std::ofstream meta(meta_path, std::ios::binary);
        if (!meta) throw UsageError("grid function: cannot write " + meta_path);
        meta << metadata_json().dump(2) << '\n';
    }

    void write_csv(std::ostream& out) const {
        csv::Writer w(out);
        std::vector<std::string> cols{"t"};
        for (std::size_t a = 0; a < grid_.dimension(); ++a) cols.push_back("x_" + std::to_string(a + 1));
        cols.push_back("u");
        if (has_errors()) cols.push_back("se");
        w.header(cols);
        std::vector<double> row;
        for (std::size_t j = 0; j < slices_.size(); ++j)
            for (std::size_t f = 0; f < grid_.size(); ++f) {
                row.clear();
                row.push_back(times_[j]);
                for (double v : grid_.point(f)) row.push_back(v);
                row.push_back(slices_[j][f]);
                if (has_errors()) row.push_back(errors_[j][f]);
                w.row(row);
            }
    }

    nlohmann::json metadata_json() const {
        nlohmann::json j;
        j["grid"] = grid_.to_json();
        j["times"] = times_;
        j["extension"] = to_string(ext_);
        j["interpolation"] = "multilinear-log";
        j["provenance"] = meta_;
        return j;
    }

    static GridFunction read(const std::string& csv_path, const std::string& meta_path) {
        std::ifstream meta_in(meta_path, std::ios::binary);
        if (!meta_in) throw UsageError("grid function: cannot open " + meta_path);
        const auto meta = nlohmann::json::parse(meta_in);
        SpatialGrid grid = SpatialGrid::from_json(meta.at("grid"));
        auto times = meta.at("times").get<std::vector<double>>();
        const auto table = csv::read_numeric_file(csv_path);
        const std::size_t n = grid.dimension();
        const bool with_se = table.columns.size() == n + 3;
        if (table.columns.size() != n + 2 && !with_se) throw UsageError("grid function: unexpected CSV columns");
        if (table.rows.size() != times.size() * grid.size()) throw UsageError("grid function: CSV row count mismatch");
        std::vector<std::vector<double>> slices(times.size(), std::vector<double>(grid.size()));
        std::vector<std::vector<double>> errors;
        if (with_se) errors.assign(times.size(), std::vector<double>(grid.size()));
        std::size_t r = 0;
        for (std::size_t j = 0; j < times.size(); ++j)
            for (std::size_t f = 0; f < grid.size(); ++f, ++r) {
                const auto& row = table.rows[r];
                if (row[0] != times[j]) throw UsageError("grid function: CSV time does not match metadata");
                const auto p = grid.point(f);
                for (std::size_t a = 0; a < n; ++a)
                    if (row[1 + a] != p[a]) throw UsageError("grid function: CSV node does not match metadata grid");
                slices[j][f] = row[n + 1];
                if (with_se) errors[j][f] = row[n + 2];
            }
        GridFunction g(std::move(grid), std::move(times), std::move(slices),
                       extension_from_string(meta.value("extension", "clamp")));
        if (with_se) g.set_errors(std::move(errors));
        if (meta.contains("provenance"))
            for (const auto& [k, v] : meta.at("provenance").items()) g.meta_[k] = v.get<std::string>();
        return g;
    }

private:
    void validate() const {
        if (times_.empty() || times_.size() != slices_.size())
            throw UsageError("grid function: times and slices must be non-empty and of equal length");
        for (std::size_t j = 1; j < times_.size(); ++j)
            if (!(times_[j] > times_[j - 1])) throw UsageError("grid function: times must increase");
        for (const auto& s : slices_) {
            if (s.size() != grid_.size()) throw UsageError("grid function: slice has wrong size");
            for (double v : s)
                if (!std::isfinite(v)) throw UsageError("grid function: non-finite value");
        }
    }

    SpatialGrid grid_;
    std::vector<double> times_;
    std::vector<std::vector<double>> slices_;
    std::vector<std::vector<double>> errors_;
    Extension ext_ = Extension::clamp;
    std::map<std::string, std::string> meta_;
};

}  // namespace robustarb
