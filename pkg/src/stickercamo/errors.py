"""Exception hierarchy. Every error carries the name of the module that raised it."""


class CamoError(ValueError):
    module = "stickercamo"

    def __str__(self):
        return f"[{self.module}] {super().__str__()}"


class GeometryError(CamoError):
    module = "geometry"


class RenderError(CamoError):
    module = "render"


class DetectorError(CamoError):
    module = "detect"


class DetectorGateError(DetectorError):
    pass


class LossError(CamoError):
    module = "losses"


class TexgenError(CamoError):
    module = "texgen"


class EvalError(CamoError):
    module = "evaluate"


class ConfigError(CamoError):
    module = "pipeline"
