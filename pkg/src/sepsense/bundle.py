"""On-disk bundle of everything a deployment needs: schema, imputer,
predictors, correlation matrix, and provenance metadata."""

from __future__ import annotations

import hashlib
import json
import os

from .cohort import VariableSchema
from .imputer import Imputer
from .predictor import RiskModel
from .uncertainty import CorrelationMatrix


class ModelBundle:
    def __init__(self, schema: VariableSchema, imputer: Imputer,
                 predictors: dict[str, RiskModel], rho: CorrelationMatrix,
                 meta: dict | None = None):
        self.schema = schema
        self.imputer = imputer
        self.predictors = predictors
        self.rho = rho
        self.meta = meta or {}

    @property
    def default_predictor(self) -> RiskModel:
        for mode in ("ras", "ras_l", "ras_n"):
            if mode in self.predictors:
                return self.predictors[mode]
        raise ValueError("bundle holds no predictor")

    def save(self, dirpath) -> None:
        os.makedirs(dirpath, exist_ok=True)
        with open(os.path.join(dirpath, "schema.json"), "w", encoding="utf-8") as f:
            json.dump(self.schema.to_json(), f, indent=2)
        self.imputer.save(os.path.join(dirpath, "imputer.bin"))
        for mode, model in self.predictors.items():
            model.save(os.path.join(dirpath, f"predictor_{mode}.bin"))
        self.rho.save(os.path.join(dirpath, "rho.bin"))
        meta = dict(self.meta)
        meta["predictors"] = sorted(self.predictors)
        with open(os.path.join(dirpath, "meta.json"), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2)

    @classmethod
    def load(cls, dirpath) -> "ModelBundle":
        with open(os.path.join(dirpath, "schema.json"), encoding="utf-8") as f:
            schema = VariableSchema.from_json(json.load(f))
        with open(os.path.join(dirpath, "meta.json"), encoding="utf-8") as f:
            meta = json.load(f)
        imputer = Imputer.load(os.path.join(dirpath, "imputer.bin"), schema)
        predictors = {}
        for mode in meta.get("predictors", []):
            predictors[mode] = RiskModel.load(
                os.path.join(dirpath, f"predictor_{mode}.bin"), schema)
        rho = CorrelationMatrix.load(os.path.join(dirpath, "rho.bin"))
        return cls(schema=schema, imputer=imputer, predictors=predictors,
                   rho=rho, meta=meta)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
