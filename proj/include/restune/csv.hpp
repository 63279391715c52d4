// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace restune {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        return -1;
    }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream is(line);
    while (std::getline(is, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline CsvTable read_csv(std::istream& in) {
    CsvTable t;
    std::string line;
    if (std::getline(in, line)) t.header = split_csv_line(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        t.rows.push_back(split_csv_line(line));
    }
    return t;
}

inline CsvTable read_csv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open CSV '" + path + "'");
    return read_csv(f);
}

inline void write_csv(std::ostream& os, const CsvTable& t) {
    for (std::size_t i = 0; i < t.header.size(); ++i) os << (i ? "," : "") << t.header[i];
    os << '\n';
    for (const auto& row : t.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
        os << '\n';
    }
}

/// Space-padded plain-text rendering with one column per header field.
inline std::string format_aligned(const CsvTable& t) {
    std::vector<std::size_t> width(t.header.size(), 0);
    auto widen = [&](const std::vector<std::string>& row) {
        for (std::size_t i = 0; i < row.size() && i < width.size(); ++i)
            width[i] = std::max(width[i], row[i].size());
    };
    widen(t.header);
    for (const auto& r : t.rows) widen(r);
    std::ostringstream os;
    auto emit = [&](const std::vector<std::string>& row) {
        for (std::size_t i = 0; i < width.size(); ++i) {
            const std::string& cell = i < row.size() ? row[i] : std::string();
            os << cell << std::string(width[i] - cell.size(), ' ');
            if (i + 1 < width.size()) os << "  ";
        }
        os << '\n';
    };
    emit(t.header);
    for (const auto& r : t.rows) emit(r);
    return os.str();
}

} // namespace restune
