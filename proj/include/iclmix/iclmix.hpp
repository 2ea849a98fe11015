#pragma once

#include "iclmix/errors.hpp"
#include "iclmix/numerics.hpp"
#include "iclmix/hermite.hpp"
#include "iclmix/datagen.hpp"
#include "iclmix/attention.hpp"
#include "iclmix/mlp.hpp"
#include "iclmix/surrogate.hpp"
#include "iclmix/eval.hpp"
#include "iclmix/io.hpp"
#include "iclmix/ingest.hpp"
#include "iclmix/experiments.hpp"
