#pragma once

#include "sprout/binio.hpp"
#include "sprout/checkpoint.hpp"
#include "sprout/cli.hpp"
#include "sprout/config_file.hpp"
#include "sprout/curation.hpp"
#include "sprout/diffusion.hpp"
#include "sprout/erank.hpp"
#include "sprout/error.hpp"
#include "sprout/feature_file.hpp"
#include "sprout/image.hpp"
#include "sprout/linalg.hpp"
#include "sprout/objective.hpp"
#include "sprout/parallel.hpp"
#include "sprout/probe.hpp"
#include "sprout/rng.hpp"
#include "sprout/tensor.hpp"
#include "sprout/trainer.hpp"
#include "sprout/udit.hpp"
