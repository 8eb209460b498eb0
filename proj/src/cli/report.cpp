#include <cstdio>
#include <sstream>

#include "p4d/cli/run.hpp"

namespace p4d::cli {

using nlohmann::json;

namespace {

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
const char* const kFamilies[] = {"pq", "sq", "rq", "pq_dagger", "ptq", "sptq", "miou", "s_assoc", "lstq", "tq", "pat"};

std::string num(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

struct LossCurve {
    std::string label;
    std::vector<double> x, y;
};

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    return out;
}

// Reads the `total` column of a stage-1 log or the `loss` column of a TAM log.
LossCurve read_log(const fs::path& p) {
    const auto raw = util::read_file(p);
    std::istringstream in(std::string(raw.begin(), raw.end()));
    LossCurve c;
    c.label = p.string();
    std::string line;
    if (!std::getline(in, line)) return c;
    const auto header = split(line);
    std::size_t col = header.size();
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == "total" || header[i] == "loss") col = i;
    if (header.empty() || header[0] != "step" || col == header.size())
        throw util::FormatError(p.string(), 0, "expected a step column and a total or loss column");
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        const auto cells = split(line);
        try {
            if (cells.size() != header.size()) throw std::invalid_argument("column count");
            c.x.push_back(std::stod(cells[0]));
            c.y.push_back(std::stod(cells[col]));
        } catch (const std::exception&) {
            throw util::FormatError(p.string(), 0, "malformed row " + std::to_string(row));
        }
    }
    return c;
}

json read_report(const fs::path& p) {
    const auto raw = util::read_file(p);
    json j = json::parse(raw.begin(), raw.end(), nullptr, false);
    if (j.is_discarded() || !j.contains("mean")) throw util::FormatError(p.string(), 0, "not a metric report");
    return j;
}

std::string svg_open(int w, int h) {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
           std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " + std::to_string(h) +
           "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

std::string escape(const std::string& s) {
    std::string o;
    for (char ch : s) {
        if (ch == '<') o += "&lt;";
        else if (ch == '>') o += "&gt;";
        else if (ch == '&') o += "&amp;";
        else if (ch == '"') o += "&quot;";
        else o += ch;
    }
    return o;
}

std::string loss_svg(const std::vector<LossCurve>& curves) {
    const int w = 640, h = 360, l = 60, r = 20, t = 30, b = 40;
    std::string s = svg_open(w, h);
    s += "<text x=\"" + std::to_string(w / 2) + "\" y=\"18\" text-anchor=\"middle\">training loss</text>\n";
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    bool any = false;
    for (const auto& c : curves)
        for (std::size_t i = 0; i < c.x.size(); ++i) {
            if (!any) {
                x0 = x1 = c.x[i];
                y0 = y1 = c.y[i];
                any = true;
            }
            x0 = std::min(x0, c.x[i]);
            x1 = std::max(x1, c.x[i]);
            y0 = std::min(y0, c.y[i]);
            y1 = std::max(y1, c.y[i]);
        }
    if (!any) {
        s += "<text x=\"" + std::to_string(w / 2) + "\" y=\"" + std::to_string(h / 2) +
             "\" text-anchor=\"middle\">no data</text>\n</svg>\n";
        return s;
    }
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const double pw = w - l - r, ph = h - t - b;
    auto px = [&](double x) { return num(l + (x - x0) / (x1 - x0) * pw, 2); };
    auto py = [&](double y) { return num(t + (1 - (y - y0) / (y1 - y0)) * ph, 2); };
    s += "<line x1=\"" + std::to_string(l) + "\" y1=\"" + std::to_string(h - b) + "\" x2=\"" + std::to_string(w - r) +
         "\" y2=\"" + std::to_string(h - b) + "\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + std::to_string(l) + "\" y1=\"" + std::to_string(t) + "\" x2=\"" + std::to_string(l) +
         "\" y2=\"" + std::to_string(h - b) + "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + std::to_string(l - 4) + "\" y=\"" + std::to_string(t + 4) + "\" text-anchor=\"end\">" + num(y1, 3) + "</text>\n";
    s += "<text x=\"" + std::to_string(l - 4) + "\" y=\"" + std::to_string(h - b) + "\" text-anchor=\"end\">" + num(y0, 3) + "</text>\n";
    s += "<text x=\"" + std::to_string(l) + "\" y=\"" + std::to_string(h - b + 16) + "\">" + num(x0, 0) + "</text>\n";
    s += "<text x=\"" + std::to_string(w - r) + "\" y=\"" + std::to_string(h - b + 16) + "\" text-anchor=\"end\">" +
         num(x1, 0) + "</text>\n";
    for (std::size_t k = 0; k < curves.size(); ++k) {
        const auto& c = curves[k];
        const char* color = kPalette[k % std::size(kPalette)];
        s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < c.x.size(); ++i) s += (i ? " " : "") + px(c.x[i]) + "," + py(c.y[i]);
        s += "\"/>\n";
        s += "<text x=\"" + std::to_string(l + 8) + "\" y=\"" + std::to_string(t + 14 + 14 * static_cast<int>(k)) +
             "\" fill=\"" + color + "\">" + escape(c.label) + "</text>\n";
    }
    return s + "</svg>\n";
}

std::string metrics_svg(const std::vector<std::pair<std::string, json>>& reports) {
    const int nf = static_cast<int>(std::size(kFamilies));
    const int w = 720, h = 360, l = 40, r = 20, t = 30, b = 50;
    std::string s = svg_open(w, h);
    s += "<text x=\"" + std::to_string(w / 2) + "\" y=\"18\" text-anchor=\"middle\">metric means</text>\n";
    if (reports.empty()) {
        s += "<text x=\"" + std::to_string(w / 2) + "\" y=\"" + std::to_string(h / 2) +
             "\" text-anchor=\"middle\">no data</text>\n</svg>\n";
        return s;
    }
    const double group = static_cast<double>(w - l - r) / nf;
    const double bar = group * 0.8 / static_cast<double>(reports.size());
    const double ph = h - t - b;
    s += "<line x1=\"" + std::to_string(l) + "\" y1=\"" + std::to_string(h - b) + "\" x2=\"" + std::to_string(w - r) +
         "\" y2=\"" + std::to_string(h - b) + "\" stroke=\"black\"/>\n";
    for (int f = 0; f < nf; ++f) {
        const double gx = l + group * f;
        s += "<text x=\"" + num(gx + group / 2, 2) + "\" y=\"" + std::to_string(h - b + 14) +
             "\" text-anchor=\"middle\">" + kFamilies[f] + "</text>\n";
        for (std::size_t k = 0; k < reports.size(); ++k) {
            const double v = std::clamp(reports[k].second["mean"].value(kFamilies[f], 0.0), 0.0, 1.0);
            s += "<rect x=\"" + num(gx + group * 0.1 + bar * static_cast<double>(k), 2) + "\" y=\"" +
                 num(t + (1 - v) * ph, 2) + "\" width=\"" + num(bar, 2) + "\" height=\"" + num(v * ph, 2) +
                 "\" fill=\"" + kPalette[k % std::size(kPalette)] + "\"/>\n";
        }
    }
    for (std::size_t k = 0; k < reports.size(); ++k)
        s += "<text x=\"" + std::to_string(l + 160 * static_cast<int>(k)) + "\" y=\"" + std::to_string(h - 14) +
             "\" fill=\"" + kPalette[k % std::size(kPalette)] + "\">" + escape(reports[k].first) + "</text>\n";
    return s + "</svg>\n";
}

}  // namespace

void cmd_report(const std::vector<fs::path>& logs, const std::vector<fs::path>& reports, const fs::path& out) {
    std::vector<LossCurve> curves;
    for (const auto& p : logs) curves.push_back(read_log(p));
    std::vector<std::pair<std::string, json>> rs;
    for (const auto& p : reports) rs.emplace_back(p.string(), read_report(p));

    fs::create_directories(out);
    util::write_file(out / "loss_curve.svg", loss_svg(curves));
    util::write_file(out / "metrics.svg", metrics_svg(rs));

    std::ostringstream md;
    md << "# Run summary\n\n## Training logs\n\n";
    bool any_rows = false;
    for (const auto& c : curves) any_rows = any_rows || !c.x.empty();
    if (!any_rows) {
        md << "no data\n";
    } else {
        md << "| log | steps | first loss | final loss |\n|---|---|---|---|\n";
        for (const auto& c : curves) {
            if (c.x.empty()) {
                md << "| " << c.label << " | 0 | no data | no data |\n";
                continue;
            }
            md << "| " << c.label << " | " << c.x.size() << " | " << num(c.y.front()) << " | " << num(c.y.back()) << " |\n";
        }
    }
    md << "\n## Metrics\n\n";
    if (rs.empty()) {
        md << "no data\n";
    } else {
        md << "| metric |";
        for (const auto& [name, _] : rs) md << ' ' << name << " |";
        md << "\n|---|";
        for (std::size_t k = 0; k < rs.size(); ++k) md << "---|";
        md << '\n';
        for (const char* f : kFamilies) {
            md << "| " << f << " |";
            for (const auto& [_, j] : rs) md << ' ' << num(j["mean"].value(f, 0.0)) << " |";
            md << '\n';
        }
    }
    md << "\n![loss](loss_curve.svg)\n![metrics](metrics.svg)\n";
    util::write_file(out / "summary.md", md.str());
}

}  // namespace p4d::cli
