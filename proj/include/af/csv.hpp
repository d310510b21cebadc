#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace af {

// Fixed-format CSV: header row, then numeric rows printed with %.17g so a
// seeded rerun reproduces the file byte for byte.
class CsvWriter {
  public:
    CsvWriter() = default;

    void open(const std::filesystem::path& path, const std::vector<std::string>& columns) {
        os_.open(path);
        if (!os_) throw std::runtime_error("csv: cannot write " + path.string());
        cols_ = columns.size();
        for (std::size_t i = 0; i < columns.size(); ++i) os_ << (i ? "," : "") << columns[i];
        os_ << "\n";
    }

    void row(const std::vector<double>& values) {
        if (values.size() != cols_) throw std::invalid_argument("csv: column count mismatch");
        char buf[40];
        for (std::size_t i = 0; i < values.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.17g", values[i]);
            os_ << (i ? "," : "") << buf;
        }
        os_ << "\n";
    }

    void close() { os_.close(); }

  private:
    std::ofstream os_;
    std::size_t cols_ = 0;
};

struct CsvTable {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    int column_index(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return static_cast<int>(i);
        return -1;
    }

    std::vector<double> column(const std::string& name) const {
        const int idx = column_index(name);
        if (idx < 0) throw std::runtime_error("csv: no column " + name);
        std::vector<double> v;
        v.reserve(rows.size());
        for (const auto& r : rows) v.push_back(r[static_cast<std::size_t>(idx)]);
        return v;
    }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("csv: cannot read " + path.string());
    CsvTable t;
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("csv: empty file " + path.string());
    {
        std::stringstream ss(line);
        std::string item;
        while (std::getline(ss, item, ',')) t.columns.push_back(item);
    }
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string item;
        while (std::getline(ss, item, ',')) row.push_back(item == "nan" || item == "-nan" ? NAN : std::stod(item));
        if (row.size() != t.columns.size()) throw std::runtime_error("csv: ragged row in " + path.string());
        t.rows.push_back(std::move(row));
    }
    return t;
}

}  // namespace af
