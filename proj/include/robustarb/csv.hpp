#pragma once

// Minimal CSV helpers. Numbers are written in shortest round-trip form so a
// write/read cycle reproduces every double exactly; '.' decimal separator and
// '\n' line endings regardless of locale.

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "robustarb/errors.hpp"

namespace robustarb::csv {

inline std::string format(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse(std::string_view s) {
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw UsageError("csv: malformed number '" + std::string(s) + "'");
    return v;
}

inline std::vector<std::string> split(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const auto comma = line.find(',', start);
        out.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

class Writer {
public:
    explicit Writer(std::ostream& os) : os_(os) {}

    void header(const std::vector<std::string>& cols) { row_strings(cols); }

    void row_strings(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) os_ << ',';
            os_ << cells[i];
        }
        os_ << '\n';
    }

    void row(const std::vector<double>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) os_ << ',';
            os_ << format(cells[i]);
        }
        os_ << '\n';
    }

private:
    std::ostream& os_;
};

struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
};

inline Table read_numeric(std::istream& is) {
    Table t;
    std::string line;
    if (!std::getline(is, line)) throw UsageError("csv: missing header row");
    t.columns = split(line);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto cells = split(line);
        if (cells.size() != t.columns.size()) throw UsageError("csv: row width does not match header");
        std::vector<double> r;
        r.reserve(cells.size());
        for (const auto& c : cells) r.push_back(parse(c));
        t.rows.push_back(std::move(r));
    }
    return t;
}

inline Table read_numeric_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("csv: cannot open " + path);
    return read_numeric(in);
}

}  // namespace robustarb::csv
