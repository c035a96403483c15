//
//   Copyright 2026 The morphatlas Authors
//
//   Licensed under the Apache License, Version 2.0 (the "License");
//   you may not use this file except in compliance with the License.
//   You may obtain a copy of the License at
//
//       http://www.apache.org/licenses/LICENSE-2.0
//
//   Unless required by applicable law or agreed to in writing, software
//   distributed under the License is distributed on an "AS IS" BASIS,
//   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
//   See the License for the specific language governing permissions and
//   limitations under the License.

#pragma once

#include "morphatlas/atlas.hpp"
#include "morphatlas/cli.hpp"
#include "morphatlas/config_json.hpp"
#include "morphatlas/errors.hpp"
#include "morphatlas/geodesic.hpp"
#include "morphatlas/grid.hpp"
#include "morphatlas/io.hpp"
#include "morphatlas/parallel.hpp"
#include "morphatlas/priors.hpp"
#include "morphatlas/registration.hpp"
#include "morphatlas/spectral.hpp"
#include "morphatlas/synth.hpp"
