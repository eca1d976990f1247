#include "idg/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace idg {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<int> parse_int_list(const std::string& s, const std::string& where) {
    std::vector<int> out;
    if (trim(s).empty()) return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw std::invalid_argument("config: bad integer '" + item + "' in " + where);
        }
    }
    return out;
}

std::string join_int_list(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(v[i]);
    }
    return s;
}

/// Binds "section.key" names to typed struct fields for both parse and echo.
class Schema {
public:
    using Setter = std::function<void(const std::string&)>;
    using Getter = std::function<std::string()>;

    void bind(const std::string& section, const std::string& key, Setter set, Getter get) {
        order_.push_back(section + "." + key);
        entries_[section + "." + key] = {std::move(set), std::move(get)};
    }

    void bind_i64(const std::string& sec, const std::string& key, std::int64_t& field) {
        bind(
            sec, key,
            [&field, sec, key](const std::string& v) {
                try {
                    field = std::stoll(trim(v));
                } catch (const std::exception&) {
                    throw std::invalid_argument("config: bad integer for " + sec + "." + key + ": '" + v + "'");
                }
            },
            [&field] { return std::to_string(field); });
    }

    void bind_int(const std::string& sec, const std::string& key, int& field) {
        bind(
            sec, key,
            [&field, sec, key](const std::string& v) {
                try {
                    field = std::stoi(trim(v));
                } catch (const std::exception&) {
                    throw std::invalid_argument("config: bad integer for " + sec + "." + key + ": '" + v + "'");
                }
            },
            [&field] { return std::to_string(field); });
    }

    void bind_u64(const std::string& sec, const std::string& key, std::uint64_t& field) {
        bind(
            sec, key,
            [&field, sec, key](const std::string& v) {
                try {
                    field = std::stoull(trim(v));
                } catch (const std::exception&) {
                    throw std::invalid_argument("config: bad integer for " + sec + "." + key + ": '" + v + "'");
                }
            },
            [&field] { return std::to_string(field); });
    }

    void bind_double(const std::string& sec, const std::string& key, double& field) {
        bind(
            sec, key,
            [&field, sec, key](const std::string& v) {
                try {
                    field = std::stod(trim(v));
                } catch (const std::exception&) {
                    throw std::invalid_argument("config: bad number for " + sec + "." + key + ": '" + v + "'");
                }
            },
            [&field] {
                std::ostringstream os;
                os.precision(17);
                os << field;
                return os.str();
            });
    }

    void bind_bool(const std::string& sec, const std::string& key, bool& field) {
        bind(
            sec, key,
            [&field, sec, key](const std::string& v) {
                const std::string t = trim(v);
                if (t == "true" || t == "1")
                    field = true;
                else if (t == "false" || t == "0")
                    field = false;
                else
                    throw std::invalid_argument("config: bad boolean for " + sec + "." + key + ": '" + v + "'");
            },
            [&field] { return field ? std::string("true") : std::string("false"); });
    }

    void bind_string(const std::string& sec, const std::string& key, std::string& field) {
        bind(
            sec, key, [&field](const std::string& v) { field = trim(v); }, [&field] { return field; });
    }

    void bind_int_list(const std::string& sec, const std::string& key, std::vector<int>& field) {
        bind(
            sec, key,
            [&field, sec, key](const std::string& v) { field = parse_int_list(v, sec + "." + key); },
            [&field] { return join_int_list(field); });
    }

    void set(const std::string& section, const std::string& key, const std::string& value) const {
        auto it = entries_.find(section + "." + key);
        if (it == entries_.end()) {
            throw std::invalid_argument("config: unknown key '" + key + "' in section [" + section + "]");
        }
        it->second.first(value);
    }

    bool has_section(const std::string& section) const {
        for (const auto& name : order_) {
            if (name.rfind(section + ".", 0) == 0) return true;
        }
        return false;
    }

    std::string echo() const {
        std::ostringstream os;
        std::string current;
        for (const auto& name : order_) {
            const auto dot = name.find('.');
            const std::string section = name.substr(0, dot);
            const std::string key = name.substr(dot + 1);
            if (section != current) {
                if (!current.empty()) os << "\n";
                os << "[" << section << "]\n";
                current = section;
            }
            os << key << " = " << entries_.at(name).second() << "\n";
        }
        return os.str();
    }

private:
    std::vector<std::string> order_;
    std::map<std::string, std::pair<Setter, Getter>> entries_;
};

Schema make_schema(RunConfig& c) {
    Schema s;
    s.bind_u64("run", "seed", c.run.seed);

    s.bind_i64("embedding", "m", c.embedding.m);
    s.bind_i64("embedding", "n", c.embedding.n);
    s.bind_i64("embedding", "length", c.embedding.length);
    s.bind_i64("embedding", "target_height", c.embedding.target_height);
    s.bind_i64("embedding", "target_width", c.embedding.target_width);

    s.bind_i64("data", "window", c.data.window);
    s.bind_double("data", "overlap", c.data.overlap);
    s.bind_i64("data", "drop", c.data.drop);
    s.bind_double("data", "rate_hz", c.data.rate_hz);
    s.bind_bool("data", "resample", c.data.resample);
    s.bind_string("data", "stats_split", c.data.stats_split);
    s.bind_string("data", "labels", c.data.labels);
    s.bind_double("data", "train_fraction", c.data.train_fraction);
    s.bind_double("data", "val_fraction", c.data.val_fraction);
    s.bind_double("data", "test_fraction", c.data.test_fraction);

    s.bind_double("diffusion", "sigma_min", c.diffusion.sigma_min);
    s.bind_double("diffusion", "sigma_max", c.diffusion.sigma_max);
    s.bind_double("diffusion", "sigma_data", c.diffusion.sigma_data);
    s.bind_int("diffusion", "steps", c.diffusion.steps);
    s.bind_double("diffusion", "rho", c.diffusion.rho);
    s.bind_double("diffusion", "p_mean", c.diffusion.p_mean);
    s.bind_double("diffusion", "p_std", c.diffusion.p_std);
    s.bind_double("diffusion", "lr", c.diffusion.lr);
    s.bind_int("diffusion", "batch", c.diffusion.batch);
    s.bind_int("diffusion", "epochs", c.diffusion.epochs);
    s.bind_int("diffusion", "checkpoint_every", c.diffusion.checkpoint_every);
    s.bind_int("diffusion", "nonfinite_retries", c.diffusion.nonfinite_retries);

    s.bind_int("backbone", "model_channels", c.backbone.model_channels);
    s.bind_int_list("backbone", "channel_multipliers", c.backbone.channel_multipliers);
    s.bind_int_list("backbone", "attention_resolutions", c.backbone.attention_resolutions);
    s.bind_int("backbone", "blocks_per_level", c.backbone.blocks_per_level);
    s.bind_int("backbone", "groupnorm_groups", c.backbone.groupnorm_groups);
    s.bind_double("backbone", "dropout", c.backbone.dropout);
    s.bind_int("backbone", "emb_channels_mult", c.backbone.emb_channels_mult);

    s.bind_double("classifier", "lr", c.classifier.lr);
    s.bind_double("classifier", "weight_decay", c.classifier.weight_decay);
    s.bind_int("classifier", "patience", c.classifier.patience);
    s.bind_int("classifier", "max_epochs", c.classifier.max_epochs);
    s.bind_int("classifier", "batch", c.classifier.batch);
    s.bind_double("classifier", "dropout", c.classifier.dropout);
    s.bind_int("classifier", "hidden", c.classifier.hidden);
    s.bind_int("classifier", "adaptive_pool_image", c.classifier.adaptive_pool_image);
    s.bind_int("classifier", "adaptive_pool_signal", c.classifier.adaptive_pool_signal);

    s.bind_int("evaluation", "bins", c.evaluation.bins);
    s.bind_double("evaluation", "tsne_perplexity", c.evaluation.tsne_perplexity);
    s.bind_int("evaluation", "tsne_iterations", c.evaluation.tsne_iterations);
    s.bind_double("evaluation", "tsne_learning_rate", c.evaluation.tsne_learning_rate);
    s.bind_double("evaluation", "tsne_early_exaggeration", c.evaluation.tsne_early_exaggeration);
    s.bind_int("evaluation", "tsne_exaggeration_iters", c.evaluation.tsne_exaggeration_iters);
    s.bind_bool("evaluation", "tsne", c.evaluation.tsne);
    s.bind_int("evaluation", "tsne_max_points", c.evaluation.tsne_max_points);
    s.bind_int("evaluation", "fid_shrinkage_enabled", c.evaluation.fid_shrinkage_enabled);
    return s;
}

void validate(const RunConfig& c) {
    EmbeddingParams{c.embedding.m, c.embedding.n, c.embedding.length}.validate();
    if (c.data.stats_split != "train" && c.data.stats_split != "all")
        throw std::invalid_argument("config: data.stats_split must be 'train' or 'all'");
    const double frac = c.data.train_fraction + c.data.val_fraction + c.data.test_fraction;
    if (std::abs(frac - 1.0) > 1e-9)
        throw std::invalid_argument("config: data split fractions must sum to 1");
    if (c.diffusion.steps < 2) throw std::invalid_argument("config: diffusion.steps must be >= 2");
    if (!(c.diffusion.sigma_max > c.diffusion.sigma_min && c.diffusion.sigma_min > 0))
        throw std::invalid_argument("config: require sigma_max > sigma_min > 0");
    if (c.diffusion.sigma_data <= 0) throw std::invalid_argument("config: sigma_data must be positive");
    if (c.diffusion.lr <= 0 || c.diffusion.batch <= 0 || c.diffusion.epochs < 0)
        throw std::invalid_argument("config: diffusion lr/batch must be positive, epochs non-negative");
    if (c.backbone.model_channels <= 0 || c.backbone.channel_multipliers.empty())
        throw std::invalid_argument("config: backbone channels/multipliers malformed");
    if (c.classifier.hidden <= 0 || c.classifier.patience <= 0 || c.classifier.max_epochs <= 0)
        throw std::invalid_argument("config: classifier settings must be positive");
    if (c.evaluation.bins <= 1) throw std::invalid_argument("config: evaluation.bins must exceed 1");
}

}  // namespace

std::string RunConfig::to_ini() const {
    RunConfig copy = *this;
    return make_schema(copy).echo();
}

RunConfig RunConfig::parse(const std::string& ini_text) {
    RunConfig c;
    Schema schema = make_schema(c);

    std::istringstream in(ini_text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw std::invalid_argument("config: malformed section header at line " + std::to_string(lineno));
            section = trim(t.substr(1, t.size() - 2));
            if (!schema.has_section(section))
                throw std::invalid_argument("config: unknown section [" + section + "] at line " +
                                            std::to_string(lineno));
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: expected key=value at line " + std::to_string(lineno));
        if (section.empty())
            throw std::invalid_argument("config: key before any [section] at line " + std::to_string(lineno));
        schema.set(section, trim(t.substr(0, eq)), t.substr(eq + 1));
    }
    validate(c);
    return c;
}

RunConfig RunConfig::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

}  // namespace idg
