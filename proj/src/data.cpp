#include "npad/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "npad/errors.hpp"
#include "npad/random.hpp"

namespace npad {

// ---------------------------------------------------------------------------
// AttributeTable and its views

AttributeTable::AttributeTable(std::vector<std::string> sample_ids, std::vector<std::string> attribute_names,
                               std::vector<std::uint8_t> values, std::vector<std::string> protected_names)
    : sample_ids_(std::move(sample_ids)),
      attribute_names_(std::move(attribute_names)),
      values_(std::move(values)),
      protected_names_(std::move(protected_names)) {
    if (values_.size() != sample_ids_.size() * attribute_names_.size()) {
        throw DimensionError("attribute table: value count does not match rows x columns");
    }
    for (auto v : values_) {
        if (v > 1) throw ParseError("attribute table: values must be 0 or 1");
    }
    std::set<std::string> names(attribute_names_.begin(), attribute_names_.end());
    if (names.size() != attribute_names_.size()) throw ParseError("attribute table: duplicate attribute name");
    for (const auto& p : protected_names_) {
        if (!names.count(p)) throw ConfigError("unknown protected attribute '" + p + "'");
    }
}

bool AttributeTable::is_protected(const std::string& name) const {
    return std::find(protected_names_.begin(), protected_names_.end(), name) != protected_names_.end();
}

bool AttributeTable::has_attribute(const std::string& name) const {
    return std::find(attribute_names_.begin(), attribute_names_.end(), name) != attribute_names_.end();
}

std::size_t AttributeTable::column_index(const std::string& name) const {
    auto it = std::find(attribute_names_.begin(), attribute_names_.end(), name);
    if (it == attribute_names_.end()) throw ConfigError("unknown attribute '" + name + "'");
    return static_cast<std::size_t>(it - attribute_names_.begin());
}

std::vector<int> AttributeTable::read_column(std::size_t col) const {
    if (observer_) observer_(attribute_names_[col], is_protected(attribute_names_[col]));
    std::vector<int> out(rows());
    for (std::size_t r = 0; r < rows(); ++r) out[r] = values_[r * cols() + col];
    return out;
}

TrainingView AttributeTable::training_view() const { return TrainingView(*this); }
EvaluationView AttributeTable::evaluation_view() const { return EvaluationView(*this); }

AttributeTable AttributeTable::subset(std::span<const std::size_t> rows) const {
    std::vector<std::string> ids;
    std::vector<std::uint8_t> vals;
    ids.reserve(rows.size());
    vals.reserve(rows.size() * cols());
    for (std::size_t r : rows) {
        if (r >= this->rows()) throw IndexError("attribute table row " + std::to_string(r) + " out of range");
        ids.push_back(sample_ids_[r]);
        vals.insert(vals.end(), values_.begin() + r * cols(), values_.begin() + (r + 1) * cols());
    }
    AttributeTable t(std::move(ids), attribute_names_, std::move(vals), protected_names_);
    t.observer_ = observer_;
    return t;
}

std::vector<std::string> TrainingView::names() const {
    std::vector<std::string> out;
    for (const auto& n : table_->attribute_names()) {
        if (!table_->is_protected(n)) out.push_back(n);
    }
    return out;
}

bool TrainingView::contains(const std::string& name) const {
    return table_->has_attribute(name) && !table_->is_protected(name);
}

std::vector<int> TrainingView::column(const std::string& name) const {
    if (table_->is_protected(name)) {
        throw FirewallError("protected attribute '" + name + "' is not readable from the training view");
    }
    return table_->read_column(table_->column_index(name));
}

std::vector<int> EvaluationView::column(const std::string& name) const {
    return table_->read_column(table_->column_index(name));
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

AttributeTable parse_attribute_table(const std::string& csv, const std::vector<std::string>& protected_names) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("attribute table: missing header");
    auto header = split_csv_line(line);
    if (header.size() < 2) throw ParseError("attribute table: header needs an id column and at least one attribute");
    std::vector<std::string> names(header.begin() + 1, header.end());
    for (const auto& p : protected_names) {
        if (std::find(names.begin(), names.end(), p) == names.end()) {
            throw ConfigError("protected attribute '" + p + "' is not a column of the table");
        }
    }

    std::vector<std::string> ids;
    std::vector<std::uint8_t> values;
    std::set<std::string> seen;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        auto cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            throw ParseError("attribute table row " + std::to_string(row) + ": expected " +
                             std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
        }
        if (!seen.insert(cells[0]).second) {
            throw ParseError("attribute table row " + std::to_string(row) + ": duplicate sample id '" + cells[0] + "'");
        }
        ids.push_back(cells[0]);
        for (std::size_t c = 1; c < cells.size(); ++c) {
            const std::string& v = cells[c];
            if (v == "1") {
                values.push_back(1);
            } else if (v == "0" || v == "-1") {
                values.push_back(0);
            } else {
                throw ParseError("attribute table row " + std::to_string(row) + ", column '" + header[c] +
                                 "': non-binary value '" + v + "'");
            }
        }
    }
    return AttributeTable(std::move(ids), std::move(names), std::move(values), protected_names);
}

AttributeTable load_attribute_table(const std::filesystem::path& path, const std::vector<std::string>& protected_names) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read attribute table " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_attribute_table(ss.str(), protected_names);
}

std::string attribute_table_csv(const AttributeTable& table) {
    std::ostringstream out;
    out << "id";
    for (const auto& n : table.attribute_names()) out << ',' << n;
    out << '\n';
    std::vector<std::vector<int>> cols;
    const auto view = table.evaluation_view();
    for (const auto& n : table.attribute_names()) cols.push_back(view.column(n));
    for (std::size_t r = 0; r < table.rows(); ++r) {
        out << table.sample_ids()[r];
        for (const auto& c : cols) out << ',' << c[r];
        out << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Dataset spec

std::array<double, 4> phi_cells(double phi, double pa, double pb, const std::string& what) {
    const double sd = std::sqrt(pa * (1 - pa) * pb * (1 - pb));
    const double p11 = pa * pb + phi * sd;
    const std::array<double, 4> cells = {p11, pa - p11, pb - p11, 1 - pa - pb + p11};
    static const char* names[] = {"P(1,1)", "P(1,0)", "P(0,1)", "P(0,0)"};
    for (int i = 0; i < 4; ++i) {
        if (cells[i] < -1e-12 || cells[i] > 1 + 1e-12) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.6f", cells[i]);
            throw SpecError(what + ": cell " + names[i] + " = " + buf + " lies outside [0, 1]");
        }
    }
    return {std::clamp(cells[0], 0.0, 1.0), std::clamp(cells[1], 0.0, 1.0), std::clamp(cells[2], 0.0, 1.0),
            std::clamp(cells[3], 0.0, 1.0)};
}

void DatasetSpec::validate() const {
    auto corr = [](double v, const std::string& name) {
        if (!(v >= -1.0 && v <= 1.0)) {
            throw SpecError(name + " = " + std::to_string(v) + " must lie in [-1, 1]");
        }
    };
    if (image_size < 16) throw SpecError("image_size must be at least 16");
    if (n_train == 0) throw SpecError("n_train must be positive");
    if (n_nonprotected > kCueNames.size()) {
        throw SpecError("n_nonprotected = " + std::to_string(n_nonprotected) + " exceeds the " +
                        std::to_string(kCueNames.size()) + " available cues");
    }
    if (nonprotected_protected_correlations.size() > n_nonprotected) {
        throw SpecError("nonprotected_protected_correlations lists more entries than n_nonprotected");
    }
    if (!(target_rate > 0.0 && target_rate < 1.0)) throw SpecError("target_rate must lie in (0, 1)");
    if (!(pixel_noise >= 0.0)) throw SpecError("pixel_noise must be non-negative");
    corr(target_protected_correlation, "target_protected_correlation");
    phi_cells(target_protected_correlation, target_rate, 0.5, "target_protected_correlation");
    for (std::size_t j = 0; j < nonprotected_protected_correlations.size(); ++j) {
        const std::string name = "nonprotected_protected_correlations[" + std::to_string(j) + "]";
        corr(nonprotected_protected_correlations[j], name);
        phi_cells(nonprotected_protected_correlations[j], 0.5, 0.5, name);
    }
}

nlohmann::json DatasetSpec::to_json() const {
    return {{"image_size", image_size},
            {"n_train", n_train},
            {"n_val", n_val},
            {"n_test", n_test},
            {"target_protected_correlation", target_protected_correlation},
            {"nonprotected_protected_correlations", nonprotected_protected_correlations},
            {"n_nonprotected", n_nonprotected},
            {"target_rate", target_rate},
            {"second_protected", second_protected},
            {"pixel_noise", pixel_noise},
            {"seed", seed}};
}

DatasetSpec DatasetSpec::from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {"image_size",
                                                "n_train",
                                                "n_val",
                                                "n_test",
                                                "target_protected_correlation",
                                                "nonprotected_protected_correlations",
                                                "n_nonprotected",
                                                "target_rate",
                                                "second_protected",
                                                "pixel_noise",
                                                "seed"};
    for (const auto& [k, v] : j.items()) {
        if (!known.count(k)) throw ConfigError("unknown dataset spec key '" + k + "'");
    }
    DatasetSpec s;
    try {
        s.image_size = j.value("image_size", s.image_size);
        s.n_train = j.value("n_train", s.n_train);
        s.n_val = j.value("n_val", s.n_val);
        s.n_test = j.value("n_test", s.n_test);
        s.target_protected_correlation = j.value("target_protected_correlation", s.target_protected_correlation);
        s.nonprotected_protected_correlations =
            j.value("nonprotected_protected_correlations", s.nonprotected_protected_correlations);
        s.n_nonprotected = j.value("n_nonprotected", s.nonprotected_protected_correlations.size());
        s.target_rate = j.value("target_rate", s.target_rate);
        s.second_protected = j.value("second_protected", s.second_protected);
        s.pixel_noise = j.value("pixel_noise", s.pixel_noise);
        s.seed = j.value("seed", s.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("dataset spec: ") + e.what());
    }
    return s;
}

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw ParseError("unknown split '" + s + "'");
}

// ---------------------------------------------------------------------------
// Manifest

std::size_t Manifest::attribute_index(const std::string& name) const {
    auto it = std::find(attribute_names.begin(), attribute_names.end(), name);
    if (it == attribute_names.end()) throw ConfigError("unknown attribute '" + name + "'");
    return static_cast<std::size_t>(it - attribute_names.begin());
}

std::vector<std::size_t> Manifest::indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].split == s) out.push_back(i);
    }
    return out;
}

AttributeTable Manifest::table(std::span<const std::size_t> rows) const {
    std::vector<std::size_t> all;
    if (rows.empty()) {
        all.resize(records.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        rows = all;
    }
    std::vector<std::string> ids;
    std::vector<std::uint8_t> values;
    for (std::size_t r : rows) {
        ids.push_back(records.at(r).id);
        for (int v : records[r].values) values.push_back(static_cast<std::uint8_t>(v));
    }
    return AttributeTable(std::move(ids), attribute_names, std::move(values), protected_names);
}

AttributeTable Manifest::table(Split s) const {
    const auto idx = indices(s);
    if (idx.empty()) return AttributeTable({}, attribute_names, {}, protected_names);
    return table(idx);
}

nlohmann::json Manifest::to_json() const {
    nlohmann::json j;
    j["spec"] = spec.to_json();
    j["attributes"] = attribute_names;
    j["protected"] = protected_names;
    j["target"] = kTargetName;
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : records) {
        recs.push_back({{"id", r.id}, {"split", to_string(r.split)}, {"values", r.values}, {"render_seed", r.render_seed}});
    }
    j["records"] = std::move(recs);
    return j;
}

Manifest Manifest::from_json(const nlohmann::json& j) {
    Manifest m;
    try {
        m.spec = DatasetSpec::from_json(j.at("spec"));
        m.attribute_names = j.at("attributes").get<std::vector<std::string>>();
        m.protected_names = j.at("protected").get<std::vector<std::string>>();
        for (const auto& r : j.at("records")) {
            SampleRecord rec;
            rec.id = r.at("id").get<std::string>();
            rec.split = parse_split(r.at("split").get<std::string>());
            rec.values = r.at("values").get<std::vector<int>>();
            rec.render_seed = r.at("render_seed").get<std::uint64_t>();
            if (rec.values.size() != m.attribute_names.size()) {
                throw ParseError("manifest record '" + rec.id + "' has the wrong number of values");
            }
            m.records.push_back(std::move(rec));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("manifest: ") + e.what());
    }
    return m;
}

Manifest generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    Manifest m;
    m.spec = spec;
    m.attribute_names.push_back(kTargetName);
    for (std::size_t j = 0; j < spec.n_nonprotected; ++j) m.attribute_names.push_back(kCueNames[j]);
    m.attribute_names.push_back(kColorName);
    m.protected_names.push_back(kColorName);
    if (spec.second_protected) {
        m.attribute_names.push_back(kSizeName);
        m.protected_names.push_back(kSizeName);
    }

    const auto tp = phi_cells(spec.target_protected_correlation, spec.target_rate, 0.5, "target_protected_correlation");
    // P(cue = 1 | color) for each cue, from its joint with color at equal marginals.
    std::vector<std::array<double, 2>> cue_given_color;
    for (std::size_t j = 0; j < spec.n_nonprotected; ++j) {
        const double phi =
            j < spec.nonprotected_protected_correlations.size() ? spec.nonprotected_protected_correlations[j] : 0.0;
        const auto c = phi_cells(phi, 0.5, 0.5, "nonprotected_protected_correlations");
        cue_given_color.push_back({c[1] / 0.5, c[0] / 0.5});
    }

    Rng rng(spec.seed);
    std::size_t counter = 0;
    auto emit = [&](Split split, int target, int color) {
        SampleRecord r;
        char id[32];
        std::snprintf(id, sizeof id, "s%06zu", counter++);
        r.id = id;
        r.split = split;
        r.values.push_back(target);
        for (const auto& p : cue_given_color) r.values.push_back(rng.uniform() < p[color] ? 1 : 0);
        r.values.push_back(color);
        if (spec.second_protected) r.values.push_back(rng.uniform() < 0.5 ? 1 : 0);
        r.render_seed = rng.next();
        m.records.push_back(std::move(r));
    };

    // Train and val carry the spurious correlation; inverse CDF over (1,1), (1,0), (0,1), (0,0).
    for (Split split : {Split::Train, Split::Val}) {
        const std::size_t n = split == Split::Train ? spec.n_train : spec.n_val;
        for (std::size_t i = 0; i < n; ++i) {
            const double u = rng.uniform();
            int target, color;
            if (u < tp[0]) {
                target = 1, color = 1;
            } else if (u < tp[0] + tp[1]) {
                target = 1, color = 0;
            } else if (u < tp[0] + tp[1] + tp[2]) {
                target = 0, color = 1;
            } else {
                target = 0, color = 0;
            }
            emit(split, target, color);
        }
    }

    // Test split: equal cell counts, cell order shuffled.
    std::vector<int> cells(spec.n_test);
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i % 4);
    rng.shuffle(cells);
    for (int c : cells) emit(Split::Test, c / 2, c % 2);
    return m;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

constexpr std::array<std::array<double, 3>, 2> kPalette = {{{0.2, 0.25, 0.85}, {0.85, 0.25, 0.2}}};

}  // namespace

Tensor render_sample(const SampleRecord& record, const Manifest& manifest) {
    const std::size_t size = manifest.spec.image_size;
    const auto value = [&](const std::string& name) { return record.values.at(manifest.attribute_index(name)); };
    const int target = value(kTargetName);
    const int color = value(kColorName);
    const auto cue = [&](std::size_t j) { return j < manifest.spec.n_nonprotected ? value(kCueNames[j]) : 0; };

    Rng rng(record.render_seed);
    const double half = static_cast<double>(size) / 2.0;
    const double cx = half + rng.uniform(-4.0, 4.0);
    const double cy = half + rng.uniform(-4.0, 4.0);
    double lo = 5.0, hi = 8.0;
    if (manifest.spec.second_protected) {
        if (value(kSizeName)) {
            lo = 6.5, hi = 8.5;
        } else {
            lo = 4.5, hi = 6.5;
        }
    }
    const double s = rng.uniform(lo, hi) * static_cast<double>(size) / 32.0;
    // Circles get the radius of equal area.
    const double radius = target ? s : s * 1.128;
    const double border = cue(1) ? 2.0 : 1.0;
    const auto& col = kPalette[color];

    Tensor img({3, size, size}, 0.0);
    const std::size_t area = size * size;
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            const double px = static_cast<double>(x) + 0.5 - cx, py = static_cast<double>(y) + 0.5 - cy;
            const double d = target ? std::max(std::abs(px), std::abs(py)) : std::sqrt(px * px + py * py);
            if (d > radius) continue;
            double shade = 1.0;
            if (d > radius - border) {
                shade = 0.5;
            } else if (cue(0) && y % 3 == 0) {
                shade = 0.4;
            }
            for (std::size_t c = 0; c < 3; ++c) img[c * area + y * size + x] = col[c] * shade - 0.5;
        }
    }
    if (cue(2)) {
        for (std::size_t y = 1; y < 4; ++y)
            for (std::size_t x = 1; x < 4; ++x)
                for (std::size_t c = 0; c < 3; ++c) img[c * area + y * size + x] = 0.5;
    }
    for (double& v : img.data()) v += rng.normal(0.0, manifest.spec.pixel_noise);
    return img;
}

Tensor render_batch(const Manifest& manifest, std::span<const std::size_t> rows) {
    const std::size_t size = manifest.spec.image_size;
    const std::size_t per = 3 * size * size;
    Tensor out({rows.size(), 3, size, size});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Tensor img = render_sample(manifest.records.at(rows[i]), manifest);
        std::copy(img.data().begin(), img.data().end(), out.raw() + i * per);
    }
    return out;
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("write_ppm expects [3 x H x W]");
    const std::size_t h = image.dim(1), w = image.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << "P6\n" << w << ' ' << h << "\n255\n";
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(image[(c * h + y) * w + x] + 0.5, 0.0, 1.0);
                out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Splits

namespace {

Partition stratified_split(const std::vector<int>& strata, std::array<double, 3> fractions, std::uint64_t seed) {
    for (double f : fractions) {
        if (!(f >= 0.0)) throw ConfigError("split fractions must be non-negative");
    }
    const double sum = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions sum to " + std::to_string(sum) + ", not 1");

    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < strata.size(); ++i) groups[strata[i]].push_back(i);
    Rng rng(seed);
    Partition p;
    for (auto& [key, rows] : groups) {
        rng.shuffle(rows);
        const auto n = static_cast<double>(rows.size());
        const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
        const auto n_val = std::min(rows.size() - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));
        p.train.insert(p.train.end(), rows.begin(), rows.begin() + n_train);
        p.val.insert(p.val.end(), rows.begin() + n_train, rows.begin() + n_train + n_val);
        p.test.insert(p.test.end(), rows.begin() + n_train + n_val, rows.end());
    }
    std::sort(p.train.begin(), p.train.end());
    std::sort(p.val.begin(), p.val.end());
    std::sort(p.test.begin(), p.test.end());
    return p;
}

}  // namespace

Partition split(const AttributeTable& table, const std::string& target, std::array<double, 3> fractions,
                std::uint64_t seed) {
    const auto view = table.evaluation_view();
    const auto t = view.column(target);
    std::vector<int> strata(t);
    if (!table.protected_names().empty()) {
        const auto p = view.column(table.protected_names().front());
        for (std::size_t i = 0; i < strata.size(); ++i) strata[i] = 2 * t[i] + p[i];
    }
    return stratified_split(strata, fractions, seed);
}

Partition split(const Manifest& manifest, std::array<double, 3> fractions, std::uint64_t seed) {
    return split(manifest.table(), kTargetName, fractions, seed);
}

double phi_coefficient(std::span<const int> a, std::span<const int> b) {
    if (a.size() != b.size()) throw DimensionError("phi_coefficient: columns differ in length");
    double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] && b[i]) ++n11;
        else if (a[i]) ++n10;
        else if (b[i]) ++n01;
        else ++n00;
    }
    const double den = std::sqrt((n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00));
    return den > 0 ? (n11 * n00 - n10 * n01) / den : 0.0;
}

}  // namespace npad
