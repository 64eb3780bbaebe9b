//! Impulse-based rigid-body engine with a ground plane at z = 0.

use crate::geometry::{add, cross, dot, mat_mul, mat_vec, norm, quat_to_mat, scale, sub, transpose, Mat3, RigidTransform, Vec3};

use super::shapes::{box_corners, Shape};

#[derive(Debug, Clone)]
pub struct Body {
    pub shape: Shape,
    pub mass: f64,
    pub friction: f64,
    pub restitution: f64,
    pub inertia: Vec3,
    pub position: Vec3,
    /// Unit quaternion `[w, x, y, z]`.
    pub orientation: [f64; 4],
    pub velocity: Vec3,
    pub angular_velocity: Vec3,
    /// Body-frame points tested against other boxes.
    pub probes: Vec<Vec3>,
}

impl Body {
    pub fn new(shape: Shape, mass: f64, friction: f64, restitution: f64) -> Self {
        let probes = match shape {
            Shape::Box { half } => box_corners(half).to_vec(),
            Shape::Sphere { .. } => Vec::new(),
        };
        Self {
            shape,
            mass,
            friction,
            restitution,
            inertia: shape.inertia(mass),
            position: [0.0; 3],
            orientation: [1.0, 0.0, 0.0, 0.0],
            velocity: [0.0; 3],
            angular_velocity: [0.0; 3],
            probes,
        }
    }

    pub fn rotation(&self) -> Mat3 {
        quat_to_mat(self.orientation)
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform::new(self.rotation(), self.position)
    }

    fn inv_inertia_world(&self) -> Mat3 {
        let r = self.rotation();
        let d = [[1.0 / self.inertia[0], 0.0, 0.0], [0.0, 1.0 / self.inertia[1], 0.0], [0.0, 0.0, 1.0 / self.inertia[2]]];
        mat_mul(&mat_mul(&r, &d), &transpose(&r))
    }

    fn inertia_world(&self) -> Mat3 {
        let r = self.rotation();
        let d = [[self.inertia[0], 0.0, 0.0], [0.0, self.inertia[1], 0.0], [0.0, 0.0, self.inertia[2]]];
        mat_mul(&mat_mul(&r, &d), &transpose(&r))
    }

    fn point_velocity(&self, p: Vec3) -> Vec3 {
        add(self.velocity, cross(self.angular_velocity, sub(p, self.position)))
    }

    pub fn kinetic_energy(&self) -> f64 {
        let r = self.rotation();
        let w = mat_vec(&transpose(&r), self.angular_velocity);
        0.5 * self.mass * dot(self.velocity, self.velocity)
            + 0.5 * (self.inertia[0] * w[0] * w[0] + self.inertia[1] * w[1] * w[1] + self.inertia[2] * w[2] * w[2])
    }

    /// Lowest point of the exact shape.
    pub fn lowest_z(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => self.position[2] - radius,
            Shape::Box { half } => {
                let r = self.rotation();
                box_corners(half)
                    .iter()
                    .map(|c| mat_vec(&r, *c)[2] + self.position[2])
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EngineParams {
    pub gravity: Vec3,
    /// Substep length in seconds.
    pub dt: f64,
    /// Fraction of penetration removed per substep.
    pub baumgarte: f64,
    /// Penetration tolerated without positional correction.
    pub slop: f64,
    pub iterations: usize,
    /// Approach speeds below this are resolved inelastically.
    pub bounce_threshold: f64,
    /// Separation within which a closing contact is resolved before it
    /// penetrates.
    pub margin: f64,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            gravity: [0.0, 0.0, -9.8],
            dt: 1.0 / 480.0,
            baumgarte: 0.2,
            slop: 1e-4,
            iterations: 8,
            bounce_threshold: 0.05,
            margin: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Contact {
    a: usize,
    /// `None` for the ground.
    b: Option<usize>,
    /// Unit normal pointing from `b` towards `a`.
    normal: Vec3,
    point: Vec3,
    /// Penetration depth; negative for a separation gap.
    depth: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Engine {
    pub bodies: Vec<Body>,
    pub params: EngineParams,
    /// Number of impulse-resolved contacts over the simulation.
    pub contact_events: usize,
}

impl Engine {
    pub fn new(bodies: Vec<Body>, params: EngineParams) -> Self {
        Self {
            bodies,
            params,
            contact_events: 0,
        }
    }

    fn p(&self) -> EngineParams {
        self.params
    }

    /// Total kinetic plus gravitational potential energy.
    pub fn energy(&self) -> f64 {
        let g = self.p().gravity;
        self.bodies
            .iter()
            .map(|b| b.kinetic_energy() - b.mass * dot(g, b.position))
            .sum()
    }

    /// Contacts penetrating or separated by less than `margin`.
    fn contacts(&self, margin: f64) -> Vec<Contact> {
        let mut out = Vec::new();
        for (i, a) in self.bodies.iter().enumerate() {
            match a.shape {
                Shape::Sphere { radius } => {
                    let depth = radius - a.position[2];
                    if depth > -margin {
                        out.push(Contact {
                            a: i,
                            b: None,
                            normal: [0.0, 0.0, 1.0],
                            point: [a.position[0], a.position[1], a.position[2] - radius],
                            depth,
                        });
                    }
                }
                Shape::Box { half } => {
                    let r = a.rotation();
                    for c in box_corners(half) {
                        let p = add(mat_vec(&r, c), a.position);
                        if p[2] < margin {
                            out.push(Contact {
                                a: i,
                                b: None,
                                normal: [0.0, 0.0, 1.0],
                                point: p,
                                depth: -p[2],
                            });
                        }
                    }
                }
            }
        }
        for i in 0..self.bodies.len() {
            for j in i + 1..self.bodies.len() {
                let (a, b) = (&self.bodies[i], &self.bodies[j]);
                if norm(sub(a.position, b.position)) > a.shape.bounding_radius() + b.shape.bounding_radius() + margin {
                    continue;
                }
                match (a.shape, b.shape) {
                    (Shape::Sphere { radius: ra }, Shape::Sphere { radius: rb }) => {
                        let d = sub(a.position, b.position);
                        let l = norm(d);
                        if l < ra + rb + margin && l > 0.0 {
                            let n = scale(d, 1.0 / l);
                            out.push(Contact {
                                a: i,
                                b: Some(j),
                                normal: n,
                                point: add(b.position, scale(n, rb - 0.5 * (ra + rb - l))),
                                depth: ra + rb - l,
                            });
                        }
                    }
                    (Shape::Sphere { radius }, Shape::Box { half }) => {
                        if let Some(c) = sphere_box(a.position, radius, b, half, margin) {
                            out.push(Contact { a: i, b: Some(j), ..c });
                        }
                    }
                    (Shape::Box { half }, Shape::Sphere { radius }) => {
                        if let Some(c) = sphere_box(b.position, radius, a, half, margin) {
                            out.push(Contact {
                                a: j,
                                b: Some(i),
                                ..c
                            });
                        }
                    }
                    (Shape::Box { .. }, Shape::Box { .. }) => {
                        box_probes(a, b, i, j, &mut out);
                        box_probes(b, a, j, i, &mut out);
                    }
                }
            }
        }
        out
    }

    /// Inverse mass and world inverse inertia of a contact side.
    fn side(&self, k: Option<usize>) -> (f64, Mat3) {
        match k {
            Some(k) => (1.0 / self.bodies[k].mass, self.bodies[k].inv_inertia_world()),
            None => (0.0, [[0.0; 3]; 3]),
        }
    }

    fn rel_velocity(&self, c: &Contact) -> Vec3 {
        let va = self.bodies[c.a].point_velocity(c.point);
        let vb = c.b.map(|b| self.bodies[b].point_velocity(c.point)).unwrap_or([0.0; 3]);
        sub(va, vb)
    }

    fn effective_mass(&self, c: &Contact, dir: Vec3) -> f64 {
        let (ima, ia) = self.side(Some(c.a));
        let (imb, ib) = self.side(c.b);
        let ra = sub(c.point, self.bodies[c.a].position);
        let mut k = ima + imb + dot(dir, cross(mat_vec(&ia, cross(ra, dir)), ra));
        if let Some(b) = c.b {
            let rb = sub(c.point, self.bodies[b].position);
            k += dot(dir, cross(mat_vec(&ib, cross(rb, dir)), rb));
        }
        k
    }

    fn apply_impulse(&mut self, c: &Contact, j: Vec3) {
        for (k, sign) in [(Some(c.a), 1.0), (c.b, -1.0)] {
            let Some(k) = k else { continue };
            let (im, ii) = self.side(Some(k));
            let body = &mut self.bodies[k];
            let r = sub(c.point, body.position);
            body.velocity = add(body.velocity, scale(j, sign * im));
            body.angular_velocity = add(body.angular_velocity, scale(mat_vec(&ii, cross(r, j)), sign));
        }
    }

    fn material(&self, c: &Contact) -> (f64, f64) {
        let a = &self.bodies[c.a];
        match c.b {
            Some(b) => {
                let b = &self.bodies[b];
                (0.5 * (a.restitution + b.restitution), (a.friction * b.friction).sqrt())
            }
            None => (a.restitution, a.friction),
        }
    }

    /// One substep: gravity, sequential contact impulses, position update
    /// (exact for free fall), then positional correction.
    pub fn substep(&mut self) {
        let p = self.p();
        let h = p.dt;
        for b in &mut self.bodies {
            b.velocity = add(b.velocity, scale(p.gravity, h));
        }
        let mut contacts = Vec::new();
        let mut targets = Vec::new();
        for c in self.contacts(p.margin) {
            let vn = dot(self.rel_velocity(&c), c.normal);
            // Normal velocity at which the position update ends exactly at
            // contact; ground contacts also see the half-step gravity drift.
            let drift = if c.b.is_none() { 0.5 * dot(p.gravity, c.normal) * h } else { 0.0 };
            let landing = c.depth / h + drift;
            if c.depth <= 0.0 && vn >= landing {
                continue;
            }
            let (e, _) = self.material(&c);
            let target = if vn < -p.bounce_threshold {
                -e * vn
            } else if c.depth <= 0.0 {
                landing
            } else {
                0.0
            };
            contacts.push(c);
            targets.push(target);
        }
        self.contact_events += contacts.len();
        let mut jn = vec![0.0; contacts.len()];
        let mut jt = vec![[0.0; 3]; contacts.len()];
        for _ in 0..p.iterations {
            for (k, c) in contacts.iter().enumerate() {
                let (_, mu) = self.material(c);
                let vn = dot(self.rel_velocity(c), c.normal);
                let kn = self.effective_mass(c, c.normal);
                let new = (jn[k] + (targets[k] - vn) / kn).max(0.0);
                let dj = new - jn[k];
                jn[k] = new;
                self.apply_impulse(c, scale(c.normal, dj));

                let v = self.rel_velocity(c);
                let vt = sub(v, scale(c.normal, dot(v, c.normal)));
                let speed = norm(vt);
                if speed > 1e-12 {
                    let dir = scale(vt, 1.0 / speed);
                    let kt = self.effective_mass(c, dir);
                    let mut acc = sub(jt[k], scale(dir, speed / kt));
                    let lim = mu * jn[k];
                    let l = norm(acc);
                    if l > lim {
                        acc = scale(acc, lim / l);
                    }
                    let d = sub(acc, jt[k]);
                    jt[k] = acc;
                    self.apply_impulse(c, d);
                }
            }
        }
        for b in &mut self.bodies {
            b.position = add(b.position, sub(scale(b.velocity, h), scale(p.gravity, 0.5 * h * h)));
            let w = b.angular_velocity;
            let q = b.orientation;
            let dq = [
                -w[0] * q[1] - w[1] * q[2] - w[2] * q[3],
                w[0] * q[0] + w[1] * q[3] - w[2] * q[2],
                -w[0] * q[3] + w[1] * q[0] + w[2] * q[1],
                w[0] * q[2] - w[1] * q[1] + w[2] * q[0],
            ];
            let q: [f64; 4] = std::array::from_fn(|i| q[i] + 0.5 * h * dq[i]);
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            // Torque-free: world angular momentum is carried over, so the
            // angular velocity follows the rotated inertia.
            let momentum = mat_vec(&b.inertia_world(), w);
            b.orientation = q.map(|v| v / n);
            b.angular_velocity = mat_vec(&b.inv_inertia_world(), momentum);
        }
        self.correct_positions();
    }

    fn correct_positions(&mut self) {
        let p = self.p();
        for c in self.contacts(0.0) {
            let excess = c.depth - p.slop;
            if excess <= 0.0 {
                continue;
            }
            let ima = 1.0 / self.bodies[c.a].mass;
            let imb = c.b.map(|b| 1.0 / self.bodies[b].mass).unwrap_or(0.0);
            let push = p.baumgarte * excess / (ima + imb);
            let a = &mut self.bodies[c.a];
            a.position = add(a.position, scale(c.normal, push * ima));
            if let Some(b) = c.b {
                let b = &mut self.bodies[b];
                b.position = sub(b.position, scale(c.normal, push * imb));
            }
        }
    }

    /// Deepest current penetration between any pair of bodies or a body
    /// and the ground.
    pub fn max_penetration(&self) -> f64 {
        self.contacts(0.0).iter().map(|c| c.depth).fold(0.0, f64::max)
    }
}

fn sphere_box(center: Vec3, radius: f64, b: &Body, half: Vec3, margin: f64) -> Option<Contact> {
    let r = b.rotation();
    let local = mat_vec(&transpose(&r), sub(center, b.position));
    let clamped: Vec3 = std::array::from_fn(|k| local[k].clamp(-half[k], half[k]));
    let d = sub(local, clamped);
    let l = norm(d);
    let (n_local, depth, p_local) = if l > 0.0 {
        if l >= radius + margin {
            return None;
        }
        (scale(d, 1.0 / l), radius - l, clamped)
    } else {
        let (axis, gap) = (0..3)
            .map(|k| (k, half[k] - local[k].abs()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("three axes");
        let mut n = [0.0; 3];
        n[axis] = local[axis].signum();
        let mut p = local;
        p[axis] = n[axis] * half[axis];
        (n, radius + gap, p)
    };
    Some(Contact {
        a: 0,
        b: None,
        normal: mat_vec(&r, n_local),
        point: add(mat_vec(&r, p_local), b.position),
        depth,
    })
}

/// Probe points of box `a` found inside box `b`.
fn box_probes(a: &Body, b: &Body, ia: usize, ib: usize, out: &mut Vec<Contact>) {
    let Shape::Box { half } = b.shape else { return };
    let ra = a.rotation();
    let rb = b.rotation();
    let rbt = transpose(&rb);
    for probe in &a.probes {
        let p = add(mat_vec(&ra, *probe), a.position);
        let local = mat_vec(&rbt, sub(p, b.position));
        if (0..3).any(|k| local[k].abs() >= half[k]) {
            continue;
        }
        let (axis, gap) = (0..3)
            .map(|k| (k, half[k] - local[k].abs()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("three axes");
        let mut n = [0.0; 3];
        n[axis] = local[axis].signum();
        // The probe sits inside `b`; the normal points out of `b` towards `a`.
        out.push(Contact {
            a: ia,
            b: Some(ib),
            normal: mat_vec(&rb, n),
            point: p,
            depth: gap,
        });
    }
}
