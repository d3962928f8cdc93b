#include "ctseg/trainer.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace ctseg::train {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void CurveLog::write_csv(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IOFailure("cannot write " + path.string());
    os << "iter,epoch,sup_loss,cons_loss,lambda,total,val_sup_loss\n";
    for (const auto& r : records) {
        os << r.iter << ',' << fmt_double(r.epoch) << ',' << fmt_double(r.sup) << ','
           << fmt_double(r.cons) << ',' << fmt_double(r.lambda) << ',' << fmt_double(r.total)
           << ',';
        if (r.val) os << fmt_double(*r.val);
        os << '\n';
    }
    if (!os) throw IOFailure("write failed: " + path.string());
}

CurveLog CurveLog::read_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IOFailure("cannot open " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw MalformedFile(path.string() + ": empty curves file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "iter,epoch,sup_loss,cons_loss,lambda,total,val_sup_loss")
        throw MalformedFile(path.string() + ": unexpected header '" + line + "'");

    CurveLog log;
    size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (line.back() == ',') cells.push_back("");
        if (cells.size() != 7)
            throw MalformedFile(path.string() + ":" + std::to_string(line_no) +
                                ": expected 7 columns, got " + std::to_string(cells.size()));
        try {
            CurveRecord r;
            r.iter = std::stoll(cells[0]);
            r.epoch = std::stod(cells[1]);
            r.sup = std::stod(cells[2]);
            r.cons = std::stod(cells[3]);
            r.lambda = std::stod(cells[4]);
            r.total = std::stod(cells[5]);
            if (!cells[6].empty()) r.val = std::stod(cells[6]);
            log.records.push_back(r);
        } catch (const std::exception&) {
            throw MalformedFile(path.string() + ":" + std::to_string(line_no) +
                                ": unparseable numeric value");
        }
    }
    return log;
}

}  // namespace ctseg::train
