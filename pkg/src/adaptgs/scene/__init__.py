from .types import (S_MAX, S_MIN, SCALE_UNIT, SH_C0, SH_C1, Camera, GaussianSet, SceneSample, View,
                    look_at, sh_coeffs)
from .io import (DataError, export_ply, import_ply, list_scenes, load_scene, map_to_uint8,
                 save_scene, write_image_png, write_map_png)
from .synthetic import SceneSpec, generate_scene, render_objects
