#pragma once

#include "diffhybrid/errors.hpp"
#include "diffhybrid/sparse.hpp"
#include "diffhybrid/array.hpp"
#include "diffhybrid/autodiff.hpp"
#include "diffhybrid/moments.hpp"
#include "diffhybrid/unscented.hpp"
#include "diffhybrid/neural.hpp"
#include "diffhybrid/stepper.hpp"
#include "diffhybrid/spatial.hpp"
#include "diffhybrid/systems.hpp"
#include "diffhybrid/bayes.hpp"
#include "diffhybrid/datagen.hpp"
#include "diffhybrid/io.hpp"
#include "diffhybrid/commands.hpp"
