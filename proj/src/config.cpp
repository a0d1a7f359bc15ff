#include "terom/config.hpp"

#include "terom/io.hpp"

#include <charconv>
#include <sstream>

namespace terom::config {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::string unquote(const std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                          (s.front() == '\'' && s.back() == '\'')))
        return s.substr(1, s.size() - 2);
    return s;
}

double parse_double(const std::string& section, const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: bad numeric value for " + section + "." + key + ": '" + value +
                          "'");
    }
}

Index parse_index(const std::string& section, const std::string& key, const std::string& value) {
    return static_cast<Index>(std::llround(parse_double(section, key, value)));
}

std::uint64_t parse_u64(const std::string& section, const std::string& key,
                        const std::string& value) {
    try {
        return std::stoull(value);
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer for " + section + "." + key + ": '" + value + "'");
    }
}

bool parse_bool(const std::string& section, const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config: bad boolean for " + section + "." + key + ": '" + value + "'");
}

} // namespace

training::TrainConfig PipelineConfig::train_config() const {
    training::TrainConfig c;
    c.epochs = training.epochs;
    c.warmup = training.warmup;
    c.lr = training.lr;
    c.one_step_batch = training.one_step_batch;
    c.rollout_batch = training.rollout_batch;
    c.loss = loss_config();
    c.full_graph = training.full_graph;
    c.jobs = training.jobs;
    c.seed = training.seed;
    return c;
}

training::LossConfig PipelineConfig::loss_config() const {
    training::LossConfig l;
    l.lambda_roll = training.lambda_roll;
    l.lambda_ag = training.lambda_ag;
    l.cap = training.cap;
    l.tail_fraction = training.tail_fraction;
    l.ag_offset = training.ag_offset;
    l.huber_beta = training.huber_beta;
    return l;
}

growth::GridGeometry PipelineConfig::grid() const {
    return growth::make_grid(geometry.nodes_per_side, geometry.side_length, geometry.thickness,
                             geometry.expander_diameter);
}

PipelineConfig parse_config(const std::string& text) {
    PipelineConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    Index line_no = 0;

    while (std::getline(in, line)) {
        ++line_no;
        const auto comment = line.find('#');
        if (comment != std::string::npos) line = line.substr(0, comment);
        line = trim(line);
        if (line.empty()) continue;

        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config: malformed section at line " + std::to_string(line_no));
            section = trim(line.substr(1, line.size() - 2));
            if (section != "geometry" && section != "dataset" && section != "pod" &&
                section != "model" && section != "training" && section != "evaluation")
                throw ConfigError("config: unknown section [" + section + "]");
            continue;
        }

        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: expected key = value at line " + std::to_string(line_no));
        const std::string key = trim(line.substr(0, eq));
        const std::string value = unquote(trim(line.substr(eq + 1)));
        if (section.empty())
            throw ConfigError("config: key '" + key + "' appears before any section");

        bool known = true;
        if (section == "geometry") {
            if (key == "nodes_per_side") cfg.geometry.nodes_per_side = parse_index(section, key, value);
            else if (key == "side_length") cfg.geometry.side_length = parse_double(section, key, value);
            else if (key == "thickness") cfg.geometry.thickness = parse_double(section, key, value);
            else if (key == "expander_diameter") cfg.geometry.expander_diameter = parse_double(section, key, value);
            else known = false;
        } else if (section == "dataset") {
            if (key == "n") cfg.dataset.n = parse_index(section, key, value);
            else if (key == "seed") cfg.dataset.seed = parse_u64(section, key, value);
            else if (key == "val_fraction") cfg.dataset.val_fraction = parse_double(section, key, value);
            else if (key == "output_dir") cfg.dataset.output_dir = value;
            else if (key == "jobs") cfg.dataset.jobs = parse_index(section, key, value);
            else known = false;
        } else if (section == "pod") {
            if (key == "variance_threshold") cfg.pod.variance_threshold = parse_double(section, key, value);
            else if (key == "displacement_mode_cap") cfg.pod.displacement_mode_cap = parse_index(section, key, value);
            else if (key == "growth_mode_cap") cfg.pod.growth_mode_cap = parse_index(section, key, value);
            else known = false;
        } else if (section == "model") {
            if (key == "variant") cfg.model.variant = value;
            else if (key == "hidden1") cfg.model.hidden1 = parse_index(section, key, value);
            else if (key == "hidden2") cfg.model.hidden2 = parse_index(section, key, value);
            else known = false;
        } else if (section == "training") {
            if (key == "epochs") cfg.training.epochs = parse_index(section, key, value);
            else if (key == "warmup") cfg.training.warmup = parse_index(section, key, value);
            else if (key == "lr") cfg.training.lr = parse_double(section, key, value);
            else if (key == "one_step_batch") cfg.training.one_step_batch = parse_index(section, key, value);
            else if (key == "rollout_batch") cfg.training.rollout_batch = parse_index(section, key, value);
            else if (key == "lambda_roll") cfg.training.lambda_roll = parse_double(section, key, value);
            else if (key == "lambda_ag") cfg.training.lambda_ag = parse_double(section, key, value);
            else if (key == "cap") cfg.training.cap = parse_double(section, key, value);
            else if (key == "tail_fraction") cfg.training.tail_fraction = parse_double(section, key, value);
            else if (key == "ag_offset") cfg.training.ag_offset = parse_double(section, key, value);
            else if (key == "huber_beta") cfg.training.huber_beta = parse_double(section, key, value);
            else if (key == "full_graph") cfg.training.full_graph = parse_bool(section, key, value);
            else if (key == "seed") cfg.training.seed = parse_u64(section, key, value);
            else if (key == "jobs") cfg.training.jobs = parse_index(section, key, value);
            else if (key == "checkpoint") cfg.training.checkpoint = value;
            else if (key == "history") cfg.training.history = value;
            else known = false;
        } else if (section == "evaluation") {
            if (key == "report") cfg.evaluation.report = value;
            else if (key == "rmse_csv") cfg.evaluation.rmse_csv = value;
            else if (key == "benchmark") cfg.evaluation.benchmark = value;
            else known = false;
        }
        if (!known)
            throw ConfigError("config: unknown key '" + key + "' in section [" + section + "]");
    }
    return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    return parse_config(io::read_text(path));
}

std::string serialize_config(const PipelineConfig& c) {
    std::ostringstream out;
    out.precision(17);
    out << "[geometry]\n";
    out << "nodes_per_side = " << c.geometry.nodes_per_side << "\n";
    out << "side_length = " << c.geometry.side_length << "\n";
    out << "thickness = " << c.geometry.thickness << "\n";
    out << "expander_diameter = " << c.geometry.expander_diameter << "\n\n";
    out << "[dataset]\n";
    out << "n = " << c.dataset.n << "\n";
    out << "seed = " << c.dataset.seed << "\n";
    out << "val_fraction = " << c.dataset.val_fraction << "\n";
    out << "output_dir = \"" << c.dataset.output_dir << "\"\n";
    out << "jobs = " << c.dataset.jobs << "\n\n";
    out << "[pod]\n";
    out << "variance_threshold = " << c.pod.variance_threshold << "\n";
    out << "displacement_mode_cap = " << c.pod.displacement_mode_cap << "\n";
    out << "growth_mode_cap = " << c.pod.growth_mode_cap << "\n\n";
    out << "[model]\n";
    out << "variant = \"" << c.model.variant << "\"\n";
    out << "hidden1 = " << c.model.hidden1 << "\n";
    out << "hidden2 = " << c.model.hidden2 << "\n\n";
    out << "[training]\n";
    out << "epochs = " << c.training.epochs << "\n";
    out << "warmup = " << c.training.warmup << "\n";
    out << "lr = " << c.training.lr << "\n";
    out << "one_step_batch = " << c.training.one_step_batch << "\n";
    out << "rollout_batch = " << c.training.rollout_batch << "\n";
    out << "lambda_roll = " << c.training.lambda_roll << "\n";
    out << "lambda_ag = " << c.training.lambda_ag << "\n";
    out << "cap = " << c.training.cap << "\n";
    out << "tail_fraction = " << c.training.tail_fraction << "\n";
    out << "ag_offset = " << c.training.ag_offset << "\n";
    out << "huber_beta = " << c.training.huber_beta << "\n";
    out << "full_graph = " << (c.training.full_graph ? "true" : "false") << "\n";
    out << "seed = " << c.training.seed << "\n";
    out << "jobs = " << c.training.jobs << "\n";
    out << "checkpoint = \"" << c.training.checkpoint << "\"\n";
    out << "history = \"" << c.training.history << "\"\n\n";
    out << "[evaluation]\n";
    out << "report = \"" << c.evaluation.report << "\"\n";
    out << "rmse_csv = \"" << c.evaluation.rmse_csv << "\"\n";
    out << "benchmark = \"" << c.evaluation.benchmark << "\"\n";
    return out.str();
}

} // namespace terom::config
